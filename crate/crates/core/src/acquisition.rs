//! Retrospective Cartesian undersampling.
//!
//! Phase-encode lines are rows of the centered k-space grid: a mask selects
//! whole rows and is broadcast across columns.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Real, Tensor};
use crate::error::{ensure_eq, Error, Result};
use crate::fourier::{ifft2c, ComplexImage, KSpaceGrid};

pub const DEFAULT_CENTER_LINES: usize = 6;
pub const DEFAULT_SIGMA_FRAC: f64 = 0.25;

/// Row mask over a k-space grid of `height` lines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    pub height: usize,
    pub sampled: Vec<bool>,
    pub acceleration: u32,
    pub seed: u64,
}

impl SamplingMask {
    pub fn full(height: usize) -> Self {
        Self {
            height,
            sampled: vec![true; height],
            acceleration: 1,
            seed: 0,
        }
    }

    pub fn empty(height: usize) -> Self {
        Self {
            height,
            sampled: vec![false; height],
            acceleration: 0,
            seed: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.sampled.iter().filter(|&&s| s).count()
    }

    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.sampled
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
    }

    /// Effective acceleration `H / sampled lines`.
    pub fn net_acceleration(&self) -> f64 {
        self.height as f64 / self.count().max(1) as f64
    }

    /// Text form: `H R seed` then the ascending sampled row indices.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.height, self.acceleration, self.seed);
        let rows: Vec<String> = self.rows().map(|r| r.to_string()).collect();
        let _ = writeln!(s, "{}", rows.join(" "));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty mask file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "mask header needs `H R seed`, got {header:?}"
            )));
        }
        let parse = |s: &str, what: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad {what} `{s}` in mask header")))
        };
        let height = parse(fields[0], "height")? as usize;
        let acceleration = parse(fields[1], "acceleration")? as u32;
        let seed = parse(fields[2], "seed")?;
        let mut sampled = vec![false; height];
        let mut last = None;
        for tok in lines.next().unwrap_or("").split_whitespace() {
            let r = parse(tok, "row index")? as usize;
            if r >= height || last.is_some_and(|l| r <= l) {
                return Err(Error::Format(format!(
                    "row index {r} out of range or not ascending"
                )));
            }
            sampled[r] = true;
            last = Some(r);
        }
        Ok(Self {
            height,
            sampled,
            acceleration,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Cartesian Gaussian line mask with exactly `floor(H/R)` rows, the
/// `n_center` rows around `H/2` always included.
pub fn make_mask(
    height: usize,
    acceleration: u32,
    n_center: usize,
    sigma_frac: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if acceleration == 0 {
        return Err(Error::invalid("acceleration must be positive"));
    }
    if !(sigma_frac > 0.0 && sigma_frac <= 1.0) {
        return Err(Error::invalid(format!("sigma_frac {sigma_frac} outside (0, 1]")));
    }
    let budget = height / acceleration as usize;
    if budget < n_center || n_center > height {
        return Err(Error::invalid(format!(
            "line budget {budget} is smaller than the {n_center} centre lines"
        )));
    }
    let mut sampled = vec![false; height];
    let start = height / 2 - n_center / 2;
    for row in sampled.iter_mut().skip(start).take(n_center) {
        *row = true;
    }
    let sigma = sigma_frac * height as f64;
    let centre = height as f64 / 2.0;
    let mut weights: Vec<f64> = (0..height)
        .map(|i| {
            if sampled[i] {
                0.0
            } else {
                (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp()
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in n_center..budget {
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < w {
                break;
            }
            u -= w;
        }
        let i = pick.expect("enough unsampled rows remain");
        sampled[i] = true;
        weights[i] = 0.0;
    }
    let mask = SamplingMask {
        height,
        sampled,
        acceleration,
        seed,
    };
    log::debug!(
        "mask H={height} R={acceleration}: {} lines, net acceleration {:.3}",
        mask.count(),
        mask.net_acceleration()
    );
    Ok(mask)
}

/// `M ⊙ y`: sampled rows copied, the rest zeroed.
pub fn undersample<T: Real>(y: &KSpaceGrid<T>, mask: &SamplingMask) -> Result<KSpaceGrid<T>> {
    ensure_eq("mask height", y.height, mask.height)?;
    let mut out = y.clone();
    for (row, &s) in mask.sampled.iter().enumerate() {
        if !s {
            let r = row * y.width..(row + 1) * y.width;
            out.real[r.clone()].fill(T::zero());
            out.imag[r].fill(T::zero());
        }
    }
    Ok(out)
}

/// Zero-filled baseline: the inverse transform of the undersampled grid.
pub fn zero_filled<T: Real>(y_u: &KSpaceGrid<T>) -> ComplexImage<T> {
    ifft2c(y_u)
}

/// Hard data consistency `M ⊙ y_u + (1 - M) ⊙ k_pred`.
pub fn data_consistency<T: Real>(
    k_pred: &KSpaceGrid<T>,
    y_u: &KSpaceGrid<T>,
    mask: &SamplingMask,
) -> Result<KSpaceGrid<T>> {
    ensure_eq("height", y_u.height, k_pred.height)?;
    ensure_eq("width", y_u.width, k_pred.width)?;
    let out = dc_forward(&k_pred.to_tensor(), &y_u.to_tensor(), &mask.sampled)?;
    KSpaceGrid::from_tensor(&out, 0)
}

/// Batched hard data consistency on `[N, 2, H, W]` tensors.
pub(crate) fn dc_forward<T: Real>(
    pred: &Tensor<T>,
    measured: &Tensor<T>,
    rows: &[bool],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = pred.nchw()?;
    let (mn, mc, mh, mw) = measured.nchw()?;
    ensure_eq("batch", n, mn)?;
    ensure_eq("channels", c, mc)?;
    ensure_eq("height", h, mh)?;
    ensure_eq("width", w, mw)?;
    ensure_eq("mask height", h, rows.len())?;
    let mut out = pred.data().to_vec();
    for plane in 0..n * c {
        for (row, &s) in rows.iter().enumerate() {
            if s {
                let r = plane * h * w + row * w..plane * h * w + (row + 1) * w;
                out[r.clone()].copy_from_slice(&measured.data()[r]);
            }
        }
    }
    Tensor::new(pred.shape().to_vec(), out)
}

pub(crate) fn dc_backward<T: Real>(g: &Tensor<T>, rows: &[bool]) -> Tensor<T> {
    let (h, w) = (g.dim(2), g.dim(3));
    let mut out = g.clone();
    let planes = g.len() / (h * w);
    for plane in 0..planes {
        for (row, &s) in rows.iter().enumerate() {
            if s {
                out.data_mut()[plane * h * w + row * w..plane * h * w + (row + 1) * w]
                    .fill(T::zero());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::fft2c;

    fn random_grid(n: usize, seed: u64) -> KSpaceGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let im = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        KSpaceGrid::from_parts(n, n, re, im).unwrap()
    }

    #[test]
    fn mask_line_budget_and_centre() {
        for (h, r) in [(192, 4), (192, 8), (64, 4), (64, 8)] {
            let m = make_mask(h, r, 6, DEFAULT_SIGMA_FRAC, 11).unwrap();
            assert_eq!(m.count(), h / r as usize);
            for row in h / 2 - 3..=h / 2 + 2 {
                assert!(m.sampled[row], "H={h} row {row}");
            }
        }
        let m = make_mask(192, 4, 6, 0.25, 3).unwrap();
        assert_eq!(m.count(), 48);
        assert!((93..=98).all(|r| m.sampled[r]));
        assert_eq!(make_mask(192, 8, 6, 0.25, 3).unwrap().count(), 24);
    }

    #[test]
    fn mask_determinism() {
        let a = make_mask(64, 4, 6, 0.25, 5).unwrap();
        assert_eq!(a, make_mask(64, 4, 6, 0.25, 5).unwrap());
        let differ = (0..20u64)
            .filter(|&s| make_mask(64, 4, 6, 0.25, s + 100).unwrap().sampled != a.sampled)
            .count();
        assert!(differ >= 19);
    }

    #[test]
    fn mask_errors() {
        assert!(make_mask(32, 8, 6, 0.25, 0).is_err());
        assert!(make_mask(64, 4, 6, 0.0, 0).is_err());
        assert!(make_mask(64, 4, 6, 1.5, 0).is_err());
    }

    #[test]
    fn mask_text_round_trip() {
        let m = make_mask(64, 4, 6, 0.25, 42).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("64 4 42\n"));
        assert_eq!(SamplingMask::from_text(&text).unwrap(), m);
        assert!(SamplingMask::from_text("64 4\n1 2").is_err());
        assert!(SamplingMask::from_text("8 4 1\n3 2").is_err());
    }

    #[test]
    fn undersample_cases() {
        let y = random_grid(16, 1);
        assert_eq!(undersample(&y, &SamplingMask::full(16)).unwrap(), y);
        let z = undersample(&y, &SamplingMask::empty(16)).unwrap();
        assert!(z.real.iter().chain(&z.imag).all(|&v| v == 0.0));

        let m = make_mask(16, 2, 4, 0.3, 9).unwrap();
        let u = undersample(&y, &m).unwrap();
        for i in 0..256 {
            let keep = if m.sampled[i / 16] { 1.0 } else { 0.0 };
            assert_eq!(u.real[i], y.real[i] * keep);
            assert_eq!(u.imag[i], y.imag[i] * keep);
        }
        assert_eq!(undersample(&u, &m).unwrap(), u);
        assert!(undersample(&y, &SamplingMask::full(8)).is_err());
    }

    #[test]
    fn zero_filled_cases() {
        let y = random_grid(16, 2);
        let x = zero_filled(&y);
        assert!(fft2c(&x).max_abs_diff(&y) < 1e-12);
        let y2 = random_grid(16, 3);
        let lhs = zero_filled(&y.add(&y2));
        let rhs = zero_filled(&y).add(&zero_filled(&y2));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn data_consistency_cases() {
        let pred = random_grid(16, 4);
        let m = make_mask(16, 2, 4, 0.3, 1).unwrap();
        let y_u = undersample(&random_grid(16, 5), &m).unwrap();

        let full_u = undersample(&random_grid(16, 5), &SamplingMask::full(16)).unwrap();
        assert_eq!(data_consistency(&pred, &full_u, &SamplingMask::full(16)).unwrap(), full_u);
        assert_eq!(
            data_consistency(&pred, &KSpaceGrid::zeros(16, 16), &SamplingMask::empty(16)).unwrap(),
            pred
        );

        let out = data_consistency(&pred, &y_u, &m).unwrap();
        for i in 0..256 {
            let src = if m.sampled[i / 16] { &y_u } else { &pred };
            assert_eq!(out.real[i].to_bits(), src.real[i].to_bits());
            assert_eq!(out.imag[i].to_bits(), src.imag[i].to_bits());
        }
        assert_eq!(data_consistency(&out, &y_u, &m).unwrap(), out);
    }
}
