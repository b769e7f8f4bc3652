use std::path::Path;

use rand::Rng;
use split_core::metrics::{ssim, DataRange, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use split_core::render::encode_pgm;
use split_core::rng::RngStream;
use split_core::tensor::{decode_tensor, encode_tensor, read_tensor, write_tensor};

fn golden(name: &str) -> Vec<u8> {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const TENSOR_VALUES: [f64; 6] = [0.0, 1.0, -2.5, 0.1, 1000.0, 3.25];

#[test]
fn tensor_bytes_match_golden_file() {
    assert_eq!(encode_tensor(&[2, 3], &TENSOR_VALUES), golden("tensor_2x3.splt"));
}

#[test]
fn golden_tensor_decodes_and_rewrites_identically() {
    let bytes = golden("tensor_2x3.splt");
    let (dims, vals) = decode_tensor(&bytes, Path::new("tensor_2x3.splt")).unwrap();
    assert_eq!(dims, vec![2, 3]);
    let want: Vec<f64> = TENSOR_VALUES.iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(vals, want);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.splt");
    write_tensor(&p, &dims, &vals).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    assert_eq!(read_tensor(&p).unwrap(), (dims, vals));
}

#[test]
fn pgm_bytes_match_golden_file() {
    let img = [-1.0, 0.0, 0.5, 1.0, 2.0, 3.0];
    assert_eq!(encode_pgm(&img, 2, 3), golden("ramp_2x3.pgm"));
}

/// SSIM with an explicit 2-D window at every pixel, truncated at the border
/// and renormalized over the pixels that exist.
fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let half = (SSIM_WINDOW / 2) as isize;
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let mut total = 0.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (mut sw, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for di in -half..=half {
                for dj in -half..=half {
                    let (y, x) = (i + di, j + dj);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    let g = (-((di * di + dj * dj) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                    let k = y as usize * w + x as usize;
                    sw += g;
                    ma += g * a[k];
                    mb += g * b[k];
                    saa += g * a[k] * a[k];
                    sbb += g * b[k] * b[k];
                    sab += g * a[k] * b[k];
                }
            }
            let (ma, mb) = (ma / sw, mb / sw);
            let va = saa / sw - ma * ma;
            let vb = sbb / sw - mb * mb;
            let cov = sab / sw - ma * mb;
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (h * w) as f64
}

#[test]
fn ssim_matches_direct_window_computation() {
    let mut rng = RngStream::new(21, "ssim").rng();
    for (h, w) in [(11, 11), (16, 24), (31, 13)] {
        let a: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.2 * (rng.random::<f64>() - 0.5)).collect();
        let fast = ssim(&a, &b, h, w, DataRange::Fixed(1.0));
        let slow = ssim_direct(&a, &b, h, w, 1.0);
        assert!((fast - slow).abs() < 1e-10, "{h}x{w}: {fast} vs {slow}");
    }
}
