//! Brain-masked PSNR and SSIM on magnitude images, error maps, and report
//! files (8-bit binary PGM plus CSV).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::Real;
use crate::error::{ensure_eq, Error, Result};
use crate::fourier::ComplexImage;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Default brightness gain of rendered error maps.
pub const ERROR_MAP_GAIN: f64 = 5.0;

fn magnitudes<T: Real>(img: &ComplexImage<T>) -> Vec<f64> {
    img.real
        .iter()
        .zip(&img.imag)
        .map(|(&re, &im)| {
            let (re, im) = (re.to_f64_real(), im.to_f64_real());
            (re * re + im * im).sqrt()
        })
        .collect()
}

fn check_pair<T: Real>(a: &ComplexImage<T>, b: &ComplexImage<T>, mask: &[bool]) -> Result<usize> {
    ensure_eq("height", a.height, b.height)?;
    ensure_eq("width", a.width, b.width)?;
    ensure_eq("mask length", a.height * a.width, mask.len())?;
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::invalid("metric mask selects no pixels"));
    }
    Ok(n)
}

/// `10·log10(peak² / MSE)` over masked magnitudes, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(a: &ComplexImage<T>, b: &ComplexImage<T>, mask: &[bool], peak: f64) -> Result<f64> {
    let n = check_pair(a, b, mask)?;
    let (ma, mb) = (magnitudes(a), magnitudes(b));
    let se: f64 = ma
        .iter()
        .zip(&mb)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((x, y), _)| (x - y) * (x - y))
        .sum();
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()))
        .collect()
}

/// Mean local SSIM over masked pixels, on magnitudes with dynamic range 1.
///
/// Each local window keeps only in-bounds masked pixels and renormalises
/// its Gaussian weights, so pixels outside the mask never influence the
/// result.
pub fn ssim<T: Real>(a: &ComplexImage<T>, b: &ComplexImage<T>, mask: &[bool]) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (ma, mb) = (magnitudes(a), magnitudes(b));
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let win = gaussian_window();
    let r = (SSIM_WINDOW / 2) as isize;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut idx: Vec<(usize, f64)> = Vec::with_capacity(win.len());
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !mask[y as usize * w + x as usize] {
                continue;
            }
            idx.clear();
            let mut wsum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let i = sy as usize * w + sx as usize;
                    if mask[i] {
                        let k = win[((dy + r) * (2 * r + 1) + dx + r) as usize];
                        idx.push((i, k));
                        wsum += k;
                    }
                }
            }
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            for &(i, k) in &idx {
                mu_a += k * ma[i];
                mu_b += k * mb[i];
            }
            mu_a /= wsum;
            mu_b /= wsum;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for &(i, k) in &idx {
                let (da, db) = (ma[i] - mu_a, mb[i] - mu_b);
                va += k * da * da;
                vb += k * db * db;
                cov += k * da * db;
            }
            va /= wsum;
            vb /= wsum;
            cov /= wsum;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub psnr: f64,
    pub ssim: f64,
    pub n_pixels: usize,
}

pub fn compare<T: Real>(estimate: &ComplexImage<T>, truth: &ComplexImage<T>, mask: &[bool]) -> Result<MetricResult> {
    Ok(MetricResult {
        psnr: psnr(estimate, truth, mask, 1.0)?,
        ssim: ssim(estimate, truth, mask)?,
        n_pixels: mask.iter().filter(|&&m| m).count(),
    })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate of one metric pair over a set of records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn from_results(results: &[MetricResult]) -> Self {
        let (psnr_mean, psnr_std) = mean_std(&results.iter().map(|r| r.psnr).collect::<Vec<_>>());
        let (ssim_mean, ssim_std) = mean_std(&results.iter().map(|r| r.ssim).collect::<Vec<_>>());
        Self {
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            n: results.len(),
        }
    }
}

/// One row of the long-format metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub cell_id: String,
    pub domain_mode: String,
    pub contrast_mode: String,
    pub accel: u32,
    pub stage: String,
    pub branch: String,
    pub summary: MetricSummary,
}

pub const METRICS_HEADER: &str =
    "cell_id,domain_mode,contrast_mode,accel,stage,branch,psnr_mean,psnr_std,ssim_mean,ssim_std,n";

/// Fixed-precision number for byte-stable CSV output.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".to_string()
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.summary;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.cell_id,
            r.domain_mode,
            r.contrast_mode,
            r.accel,
            r.stage,
            r.branch,
            fmt_num(s.psnr_mean),
            fmt_num(s.psnr_std),
            fmt_num(s.ssim_mean),
            fmt_num(s.ssim_std),
            s.n
        )
        .expect("string write");
    }
    out
}

/// 8-bit binary PGM (P5).
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    ensure_eq("pixel count", width * height, pixels.len())?;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let bytes = pgm_bytes(width, height, pixels)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Map values to bytes: `round(255 · clamp(gain·v, 0, 1))`.
pub fn to_gray(values: &[f64], gain: f64) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (255.0 * (gain * v).clamp(0.0, 1.0)).round() as u8)
        .collect()
}

/// Absolute magnitude error map, scaled by `gain`.
pub fn error_map<T: Real>(a: &ComplexImage<T>, b: &ComplexImage<T>, gain: f64) -> Result<Vec<u8>> {
    ensure_eq("height", a.height, b.height)?;
    ensure_eq("width", a.width, b.width)?;
    let diff: Vec<f64> = magnitudes(a).iter().zip(magnitudes(b)).map(|(x, y)| (x - y).abs()).collect();
    Ok(to_gray(&diff, gain))
}

/// Everything shown for one record.
#[derive(Clone, Debug)]
pub struct RecordPanels {
    pub record_id: u32,
    /// named estimates in display order, e.g. zero-filled, per-stage
    /// outputs, final
    pub panels: Vec<(String, ComplexImage<f32>)>,
    pub truth: ComplexImage<f32>,
    pub mask: Vec<bool>,
}

/// Write a grayscale PGM per panel and ground truth, an error map per panel,
/// and `report.csv` with per-panel metrics. Returns the written paths.
pub fn render_report(records: &[RecordPanels], out_dir: &Path, gain: f64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut csv = String::from("record_id,panel,psnr,ssim,n_pixels\n");
    for rec in records {
        let (w, h) = (rec.truth.width, rec.truth.height);
        let mut emit = |name: String, pixels: Vec<u8>| -> Result<()> {
            let path = out_dir.join(name);
            write_pgm(&path, w, h, &pixels)?;
            written.push(path);
            Ok(())
        };
        emit(
            format!("record_{:05}_truth.pgm", rec.record_id),
            to_gray(&magnitudes(&rec.truth), 1.0),
        )?;
        for (name, img) in &rec.panels {
            emit(format!("record_{:05}_{name}.pgm", rec.record_id), to_gray(&magnitudes(img), 1.0))?;
            emit(
                format!("record_{:05}_{name}_error.pgm", rec.record_id),
                error_map(img, &rec.truth, gain)?,
            )?;
            let m = compare(img, &rec.truth, &rec.mask)?;
            writeln!(
                csv,
                "{},{name},{},{},{}",
                rec.record_id,
                fmt_num(m.psnr),
                fmt_num(m.ssim),
                m.n_pixels
            )
            .expect("string write");
        }
    }
    let path = out_dir.join("report.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
