//! Reconstruction quality (MSE, PSNR, SSIM) and codebook-health exports.
//!
//! PSNR uses MAX = 1.0 and caps exact reconstructions at 99 dB so CSVs stay
//! finite. SSIM runs on 8x8 windows with stride 1 and the usual constants
//! C1 = 0.01^2, C2 = 0.03^2; 3-channel images are reduced to grayscale by
//! channel mean first. All floats in CSV output carry 6 significant digits.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::data::Image;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize, usize), b: (usize, usize, usize) },
    #[error("image {h}x{w} is smaller than the {win}x{win} SSIM window")]
    TooSmall { h: usize, w: usize, win: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.height != b.height || a.width != b.width || a.channels != b.channels {
        return Err(MetricsError::ShapeMismatch {
            a: (a.height, a.width, a.channels),
            b: (b.height, b.width, b.channels),
        });
    }
    Ok(())
}

/// Mean squared error over all samples of two same-shaped images.
pub fn mse_images(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(acc / a.data.len() as f64)
}

/// `10 log10(1 / mse)` in dB, capped at [`PSNR_CAP_DB`] for exact matches.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = mse_images(a, b)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn to_gray(img: &Image) -> Vec<f64> {
    match img.channels {
        1 => img.data.iter().map(|&v| v as f64).collect(),
        _ => img
            .data
            .chunks_exact(img.channels)
            .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / img.channels as f64)
            .collect(),
    }
}

/// Mean local SSIM over all stride-1 8x8 windows, clamped to `[-1, 1]`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { h, w, win: SSIM_WINDOW });
    }
    let ga = to_gray(a);
    let gb = to_gray(b);
    let npix = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for y in y0..y0 + SSIM_WINDOW {
                let row = y * w;
                for x in x0..x0 + SSIM_WINDOW {
                    let va = ga[row + x];
                    let vb = gb[row + x];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let mu_a = sa / npix;
            let mu_b = sb / npix;
            let var_a = saa / npix - mu_a * mu_a;
            let var_b = sbb / npix - mu_b * mu_b;
            let cov = sab / npix - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += s;
            windows += 1;
        }
    }
    Ok((total / windows as f64).clamp(-1.0, 1.0))
}

/// Per-image and aggregate reconstruction quality.
#[derive(Debug, Clone)]
pub struct QualityReport {
    pub per_image: Vec<ImageQuality>,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ImageQuality {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn quality_report(pairs: &[(&Image, &Image)]) -> Result<QualityReport> {
    let mut per_image = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        per_image.push(ImageQuality { mse: mse_images(a, b)?, psnr: psnr(a, b)?, ssim: ssim(a, b)? });
    }
    let n = per_image.len().max(1) as f64;
    Ok(QualityReport {
        mean_mse: per_image.iter().map(|q| q.mse).sum::<f64>() / n,
        mean_psnr: per_image.iter().map(|q| q.psnr).sum::<f64>() / n,
        mean_ssim: per_image.iter().map(|q| q.ssim).sum::<f64>() / n,
        per_image,
    })
}

/// Format with 6 significant digits, the shared convention for every CSV this
/// crate writes.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// CSV of per-entry usage: `index,count,active`, active meaning the entry was
/// selected at least once.
pub fn export_code_activity(counts: &[u64], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "index,count,active")?;
    for (i, &c) in counts.iter().enumerate() {
        writeln!(w, "{},{},{}", i, c, (c >= 1) as u8)?;
    }
    w.flush()?;
    Ok(())
}
