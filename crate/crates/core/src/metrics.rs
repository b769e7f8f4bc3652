//! PSNR and SSIM between single-channel images and per-material tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::spectral::MATERIAL_NAMES;
use crate::types::MaterialImage;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataRange {
    /// Maximum over both images (reference-free comparisons).
    MaxOfPair,
    /// Maximum of the second (reference) image.
    MaxOfReference,
    Fixed(f64),
}

impl DataRange {
    pub fn resolve(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DataRange::Fixed(v) => v,
            DataRange::MaxOfReference => b.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            DataRange::MaxOfPair => a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn label(self) -> String {
        match self {
            DataRange::MaxOfPair => "max_of_pair".into(),
            DataRange::MaxOfReference => "max_of_reference".into(),
            DataRange::Fixed(v) => format!("fixed:{v}"),
        }
    }
}

/// `10 log10(range² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &[f64], b: &[f64], range: DataRange) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr needs equal shapes");
    assert!(!a.is_empty(), "psnr of empty images");
    let r = range.resolve(a, b);
    if !(r > 0.0) {
        warn!("psnr data range {r} is not positive; reporting the cap");
        return PSNR_CAP_DB;
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (r * r / mse).log10()).min(PSNR_CAP_DB)
}

fn gaussian_taps() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect()
}

/// Separable Gaussian filter truncated at the border, weights renormalized
/// per output pixel.
fn blur(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let half = taps.len() / 2;
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (pos, len) = if along_rows { (j, w) } else { (i, h) };
                let lo = pos.saturating_sub(half);
                let hi = (pos + half).min(len - 1);
                let mut acc = 0.0;
                let mut norm = 0.0;
                for q in lo..=hi {
                    let t = taps[q + half - pos];
                    let v = if along_rows { src[i * w + q] } else { src[q * w + j] };
                    acc += t * v;
                    norm += t;
                }
                out[i * w + j] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5).
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, range: DataRange) -> f64 {
    assert_eq!(a.len(), h * w, "ssim image a does not match shape");
    assert_eq!(b.len(), h * w, "ssim image b does not match shape");
    assert!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "image smaller than the ssim window");
    let r = range.resolve(a, b);
    let c1 = (SSIM_K1 * r).powi(2);
    let c2 = (SSIM_K2 * r).powi(2);
    let taps = gaussian_taps();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = blur(a, h, w, &taps);
    let mu_b = blur(b, h, w, &taps);
    let s_aa = blur(&aa, h, w, &taps);
    let s_bb = blur(&bb, h, w, &taps);
    let s_ab = blur(&ab, h, w, &taps);
    let mut total = 0.0;
    for k in 0..h * w {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let va = s_aa[k] - ma * ma;
        let vb = s_bb[k] - mb * mb;
        let cov = s_ab[k] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += if num == den { 1.0 } else { num / den };
    }
    total / (h * w) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialScore {
    pub material: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<MaterialScore>,
    pub range: DataRange,
}

impl Evaluation {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("material,psnr_db,ssim,data_range_mode\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.6},{}", r.material, r.psnr_db, r.ssim, self.range.label()).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn material_name(m: usize) -> String {
    MATERIAL_NAMES.get(m).map(|s| s.to_string()).unwrap_or_else(|| format!("material{m}"))
}

/// Per-channel PSNR and SSIM against ground truth, range from the reference.
pub fn evaluate(recon: &MaterialImage, truth: &MaterialImage) -> Evaluation {
    evaluate_with(recon, truth, DataRange::MaxOfReference)
}

pub fn evaluate_with(recon: &MaterialImage, truth: &MaterialImage, range: DataRange) -> Evaluation {
    assert!(recon.same_shape(truth), "reconstruction and truth shapes differ");
    let rows = (0..truth.materials)
        .map(|m| {
            let (a, b) = (recon.channel(m), truth.channel(m));
            MaterialScore {
                material: material_name(m),
                psnr_db: psnr(a, b, range),
                ssim: ssim(a, b, truth.height, truth.width, range),
            }
        })
        .collect();
    Evaluation { rows, range }
}
