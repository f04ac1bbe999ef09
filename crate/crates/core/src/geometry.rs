//! Differentiable 2D rigid warps with bilinear resampling.
//!
//! Convention: the rigid map sends a point `s` to `R(theta)(s - c) + c + t`
//! where `c = ((W-1)/2, (H-1)/2)` is the image centre, `x` runs along
//! columns and `y` along rows. Warping is backward: output pixel `o` reads
//! the input at the pre-image of `o`. Samples outside the raster read 0.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};
use crate::error::{ensure_eq, Error, Result};
use crate::fourier::ComplexImage;
use crate::par;

/// Rigid motion: translation in pixels, rotation in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
}

impl RigidParams {
    pub const IDENTITY: RigidParams = RigidParams {
        tx: 0.0,
        ty: 0.0,
        theta: 0.0,
    };

    pub fn new(tx: f64, ty: f64, theta: f64) -> Self {
        Self { tx, ty, theta }
    }

    /// Validated constructor for simulated motion.
    pub fn motion(tx: f64, ty: f64, theta: f64) -> Result<Self> {
        let p = Self { tx, ty, theta };
        p.check_finite()?;
        if theta.abs() >= std::f64::consts::PI {
            return Err(Error::invalid(format!("|theta| = {} must be below pi", theta.abs())));
        }
        Ok(p)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.tx.is_finite() && self.ty.is_finite() && self.theta.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("non-finite rigid parameters {self:?}")))
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.tx, self.ty, self.theta]
    }

    pub fn from_slice<T: Real>(v: &[T]) -> Self {
        Self::new(v[0].to_f64_real(), v[1].to_f64_real(), v[2].to_f64_real())
    }

    pub fn invert(&self) -> RigidParams {
        let (s, c) = self.theta.sin_cos();
        RigidParams {
            tx: -(c * self.tx + s * self.ty),
            ty: -(-s * self.tx + c * self.ty),
            theta: -self.theta,
        }
    }

    /// The single transform equivalent to applying `self`, then `then`.
    pub fn compose(&self, then: &RigidParams) -> RigidParams {
        let (s, c) = then.theta.sin_cos();
        RigidParams {
            tx: c * self.tx - s * self.ty + then.tx,
            ty: s * self.tx + c * self.ty + then.ty,
            theta: self.theta + then.theta,
        }
    }
}

pub fn invert(p: &RigidParams) -> RigidParams {
    p.invert()
}

pub fn compose(p1: &RigidParams, p2: &RigidParams) -> RigidParams {
    p1.compose(p2)
}

/// Warp both planes of `img` by `p`.
pub fn apply_rigid<T: Real>(img: &ComplexImage<T>, p: &RigidParams) -> Result<ComplexImage<T>> {
    p.check_finite()?;
    let params = Tensor::new(
        vec![1, 3],
        p.to_array().iter().map(|&v| T::real(v)).collect(),
    )?;
    let out = warp_forward(&img.to_tensor(), &params)?;
    ComplexImage::from_tensor(&out, 0)
}

struct Sample<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
    dx: T,
    dy: T,
}

#[inline]
fn locate<T: Real>(row: usize, col: usize, h: usize, w: usize, p: &[T]) -> Sample<T> {
    let half = T::real(0.5);
    let cx = T::real(w as f64 - 1.0) * half;
    let cy = T::real(h as f64 - 1.0) * half;
    let (s, c) = p[2].sin_cos();
    let dx = T::real(col as f64) - cx - p[0];
    let dy = T::real(row as f64) - cy - p[1];
    let sx = c * dx + s * dy + cx;
    let sy = -s * dx + c * dy + cy;
    let (fx0, fy0) = (sx.floor(), sy.floor());
    Sample {
        x0: fx0.to_f64_real() as isize,
        y0: fy0.to_f64_real() as isize,
        fx: sx - fx0,
        fy: sy - fy0,
        dx,
        dy,
    }
}

#[inline]
fn at<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

fn check_params<T: Real>(img: &Tensor<T>, params: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let dims = img.nchw()?;
    ensure_eq("rigid parameter count", dims.0 * 3, params.len())?;
    if params.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite rigid parameters"));
    }
    Ok(dims)
}

/// `img: [N, C, H, W]`, `params: [N, 3]` as `(tx, ty, theta)` per sample.
pub(crate) fn warp_forward<T: Real>(img: &Tensor<T>, params: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = check_params(img, params)?;
    let hw = h * w;
    let src = img.data();
    let pd = params.data();
    let mut out = vec![T::zero(); img.len()];
    par::for_each_chunk(&mut out, c * hw, |n, o| {
        let p = &pd[3 * n..3 * n + 3];
        let one = T::one();
        for row in 0..h {
            for col in 0..w {
                let sm = locate(row, col, h, w, p);
                let (w00, w01) = ((one - sm.fy) * (one - sm.fx), (one - sm.fy) * sm.fx);
                let (w10, w11) = (sm.fy * (one - sm.fx), sm.fy * sm.fx);
                for ch in 0..c {
                    let plane = &src[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                    let v = w00 * at(plane, h, w, sm.y0, sm.x0)
                        + w01 * at(plane, h, w, sm.y0, sm.x0 + 1)
                        + w10 * at(plane, h, w, sm.y0 + 1, sm.x0)
                        + w11 * at(plane, h, w, sm.y0 + 1, sm.x0 + 1);
                    o[ch * hw + row * w + col] = v;
                }
            }
        }
    });
    Tensor::new(img.shape().to_vec(), out)
}

/// Gradients w.r.t. the image and the parameters.
pub(crate) fn warp_backward<T: Real>(
    img: &Tensor<T>,
    params: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n_batch, c, h, w) = check_params(img, params)?;
    let hw = h * w;
    let src = img.data();
    let pd = params.data();
    let gd = g.data();
    let parts = par::map_range(n_batch, |n| {
        let p = &pd[3 * n..3 * n + 3];
        let (s, co) = p[2].sin_cos();
        let one = T::one();
        let mut dimg = vec![T::zero(); c * hw];
        let mut dp = [T::zero(); 3];
        let scatter = |buf: &mut [T], y: isize, x: isize, v: T| {
            if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                buf[y as usize * w + x as usize] += v;
            }
        };
        for row in 0..h {
            for col in 0..w {
                let sm = locate(row, col, h, w, p);
                let mut dsx = T::zero();
                let mut dsy = T::zero();
                for ch in 0..c {
                    let gv = gd[(n * c + ch) * hw + row * w + col];
                    if gv == T::zero() {
                        continue;
                    }
                    let plane = &src[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                    let i00 = at(plane, h, w, sm.y0, sm.x0);
                    let i01 = at(plane, h, w, sm.y0, sm.x0 + 1);
                    let i10 = at(plane, h, w, sm.y0 + 1, sm.x0);
                    let i11 = at(plane, h, w, sm.y0 + 1, sm.x0 + 1);
                    dsx += gv * ((one - sm.fy) * (i01 - i00) + sm.fy * (i11 - i10));
                    dsy += gv * ((one - sm.fx) * (i10 - i00) + sm.fx * (i11 - i01));
                    let d = &mut dimg[ch * hw..(ch + 1) * hw];
                    scatter(d, sm.y0, sm.x0, gv * (one - sm.fy) * (one - sm.fx));
                    scatter(d, sm.y0, sm.x0 + 1, gv * (one - sm.fy) * sm.fx);
                    scatter(d, sm.y0 + 1, sm.x0, gv * sm.fy * (one - sm.fx));
                    scatter(d, sm.y0 + 1, sm.x0 + 1, gv * sm.fy * sm.fx);
                }
                dp[0] += -co * dsx + s * dsy;
                dp[1] += -s * dsx - co * dsy;
                dp[2] += (-s * sm.dx + co * sm.dy) * dsx + (-co * sm.dx - s * sm.dy) * dsy;
            }
        }
        (dimg, dp)
    });
    let mut dimg = Vec::with_capacity(img.len());
    let mut dparams = Vec::with_capacity(params.len());
    for (di, dp) in parts {
        dimg.extend_from_slice(&di);
        dparams.extend_from_slice(&dp);
    }
    Ok((
        Tensor::new(img.shape().to_vec(), dimg)?,
        Tensor::new(params.shape().to_vec(), dparams)?,
    ))
}

/// Mean squared difference over the central box covering `frac` of each
/// extent, summed over both planes.
pub fn interior_mse<T: Real>(a: &ComplexImage<T>, b: &ComplexImage<T>, frac: f64) -> f64 {
    let (h, w) = (a.height, a.width);
    let (mh, mw) = (
        ((h as f64) * (1.0 - frac) / 2.0).round() as usize,
        ((w as f64) * (1.0 - frac) / 2.0).round() as usize,
    );
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in mh..h - mh {
        for x in mw..w - mw {
            let i = y * w + x;
            acc += (a.real[i] - b.real[i]).to_f64_real().powi(2) + (a.imag[i] - b.imag[i]).to_f64_real().powi(2);
            n += 1;
        }
    }
    acc / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(n: usize, seed: u64) -> ComplexImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                (
                    rng.gen_range(0.3..0.7) * n as f64,
                    rng.gen_range(0.3..0.7) * n as f64,
                    rng.gen_range(0.06..0.15) * n as f64,
                    rng.gen_range(0.2..1.0),
                )
            })
            .collect();
        let mut re = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                re[y * n + x] = bumps
                    .iter()
                    .map(|&(cx, cy, r, a)| {
                        a * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * r * r)).exp()
                    })
                    .sum();
            }
        }
        let im = re.iter().map(|v| 0.5 * v).collect();
        ComplexImage::from_parts(n, n, re, im).unwrap()
    }

    fn random_image(n: usize, seed: u64) -> ComplexImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let im = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        ComplexImage::from_parts(n, n, re, im).unwrap()
    }

    #[test]
    fn identity_is_exact() {
        let x = random_image(16, 1);
        assert_eq!(apply_rigid(&x, &RigidParams::IDENTITY).unwrap(), x);
    }

    #[test]
    fn unit_translation_shifts_columns() {
        let x = random_image(12, 2);
        let y = apply_rigid(&x, &RigidParams::new(1.0, 0.0, 0.0)).unwrap();
        for r in 0..12 {
            for c in 1..12 {
                assert_eq!(y.real[r * 12 + c], x.real[r * 12 + c - 1]);
                assert_eq!(y.imag[r * 12 + c], x.imag[r * 12 + c - 1]);
            }
        }
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let n = 10;
        let x = random_image(n, 3);
        let y = apply_rigid(&x, &RigidParams::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)).unwrap();
        for r in 1..n - 1 {
            for c in 1..n - 1 {
                let expected = x.real[(n - 1 - c) * n + r];
                assert!((y.real[r * n + c] - expected).abs() < 1e-6, "({r},{c})");
            }
        }
    }

    #[test]
    fn invert_examples() {
        assert_eq!(RigidParams::IDENTITY.invert(), RigidParams::new(-0.0, -0.0, -0.0));
        let p = RigidParams::new(3.0, 0.0, 0.0).invert();
        assert_eq!((p.tx, p.ty, p.theta), (-3.0, 0.0, 0.0));
    }

    #[test]
    fn compose_examples() {
        let p = RigidParams::new(1.5, -2.0, 0.3);
        assert_eq!(p.compose(&RigidParams::IDENTITY), p);
        let t = RigidParams::new(1.0, 0.0, 0.0).compose(&RigidParams::new(2.0, 0.0, 0.0));
        assert_eq!(t, RigidParams::new(3.0, 0.0, 0.0));
        let q = p.compose(&p.invert());
        assert!(q.tx.abs() < 1e-12 && q.ty.abs() < 1e-12 && q.theta.abs() < 1e-12);
    }

    #[test]
    fn warp_round_trip_and_double_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..4 {
            let x = smooth_image(48, seed);
            let p1 = RigidParams::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-0.17..0.17));
            let p2 = RigidParams::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-0.17..0.17));
            let back = apply_rigid(&apply_rigid(&x, &p1).unwrap(), &p1.invert()).unwrap();
            assert!(interior_mse(&back, &x, 0.7) < 1e-3);
            let twice = apply_rigid(&apply_rigid(&x, &p1).unwrap(), &p2).unwrap();
            let once = apply_rigid(&x, &p1.compose(&p2)).unwrap();
            assert!(interior_mse(&twice, &once, 0.7) < 1e-3);
        }
    }

    #[test]
    fn zero_image_stays_zero() {
        let z = ComplexImage::<f64>::zeros(16, 16);
        let y = apply_rigid(&z, &RigidParams::new(2.3, -1.1, 0.4)).unwrap();
        assert!(y.real.iter().chain(&y.imag).all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_group_law() {
        let step = RigidParams::new(0.0, 0.0, 0.01);
        let mut acc = RigidParams::IDENTITY;
        let mut sum = 0.0;
        for _ in 0..10 {
            acc = acc.compose(&step);
            sum += 0.01;
        }
        assert_eq!(acc.theta, sum);
    }

    #[test]
    fn non_finite_rejected() {
        let x = random_image(8, 1);
        assert!(apply_rigid(&x, &RigidParams::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(RigidParams::motion(0.0, 0.0, 4.0).is_err());
    }
}
