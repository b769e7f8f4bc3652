//! 16-bit binary PGM output.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const PGM_MAXVAL: u16 = 65535;

/// Encodes one image, scaled so its minimum maps to 0 and its maximum to 65535.
pub fn encode_pgm(data: &[f64], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(data.len(), height * width, "image does not match {height}x{width}");
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let header = format!("P5\n# scale min={min} max={max}\n{width} {height}\n{PGM_MAXVAL}\n");
    let mut out = header.into_bytes();
    out.reserve(2 * data.len());
    for &v in data {
        let level = if span > 0.0 {
            ((v - min) / span * PGM_MAXVAL as f64).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

/// Output paths for `channels` images: the path itself for one channel,
/// `<stem>_ch<k>.pgm` otherwise.
pub fn channel_paths(path: &Path, channels: usize) -> Vec<PathBuf> {
    if channels == 1 {
        return vec![path.to_path_buf()];
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (0..channels)
        .map(|k| path.with_file_name(format!("{stem}_ch{k}.pgm")))
        .collect()
}

/// Writes a `channels × height × width` stack; returns the written paths.
pub fn write_pgm_stack(path: impl AsRef<Path>, data: &[f64], channels: usize, height: usize, width: usize) -> Result<Vec<PathBuf>> {
    let n = height * width;
    assert_eq!(data.len(), channels * n, "stack does not match its shape");
    let paths = channel_paths(path.as_ref(), channels);
    for (k, p) in paths.iter().enumerate() {
        fs::write(p, encode_pgm(&data[k * n..(k + 1) * n], height, width)).map_err(|e| Error::io(p, e))?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_one_ramp() {
        let bytes = encode_pgm(&[0.0, 2.0], 1, 2);
        let header = b"P5\n# scale min=0 max=2\n2 1\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 0, 0xFF, 0xFF]);
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let bytes = encode_pgm(&[3.5; 4], 2, 2);
        assert!(bytes.ends_with(&[0; 8]));
    }

    #[test]
    fn channel_naming() {
        let p = Path::new("/tmp/out.pgm");
        assert_eq!(channel_paths(p, 1), vec![PathBuf::from("/tmp/out.pgm")]);
        assert_eq!(
            channel_paths(p, 2),
            vec![PathBuf::from("/tmp/out_ch0.pgm"), PathBuf::from("/tmp/out_ch1.pgm")]
        );
    }
}
