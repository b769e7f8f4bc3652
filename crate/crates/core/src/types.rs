//! Domain arrays: material density stacks and spectral sinograms.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

/// Stack of per-material density maps, shape `M × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialImage {
    pub materials: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MaterialImage {
    pub fn zeros(materials: usize, height: usize, width: usize) -> Self {
        assert!(materials >= 1, "need at least one material");
        assert!(height >= 2 && width >= 2, "image must be at least 2x2");
        Self {
            materials,
            height,
            width,
            data: vec![0.0; materials * height * width],
        }
    }

    pub fn from_vec(materials: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if materials == 0 || height < 2 || width < 2 {
            return Err(Error::Config(format!(
                "invalid material image shape {materials}x{height}x{width}"
            )));
        }
        if data.len() != materials * height * width {
            return Err(Error::Config(format!(
                "material image {materials}x{height}x{width} needs {} values, got {}",
                materials * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("material image entry {i}")));
        }
        Ok(Self {
            materials,
            height,
            width,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[m * n..(m + 1) * n]
    }

    pub fn channel_mut(&mut self, m: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[m * n..(m + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.materials == other.materials && self.height == other.height && self.width == other.width
    }

    /// Rounds every value to single precision, matching what the file format stores.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(path, &[self.materials, self.height, self.width], &self.data)
    }

    /// Loads a `M × H × W` tensor; a 2-D tensor is read as a single material.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dims, data) = read_tensor(path)?;
        match dims.as_slice() {
            [m, h, w] => Self::from_vec(*m, *h, *w, data),
            [h, w] => Self::from_vec(1, *h, *w, data),
            _ => Err(Error::format(path, format!("expected 2 or 3 dims, found {dims:?}"))),
        }
    }
}

/// Measurements over angles × detector bins × energy bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSinogram {
    pub n_angles: usize,
    pub n_dets: usize,
    pub n_bins: usize,
    pub data: Vec<f64>,
}

impl SpectralSinogram {
    pub fn zeros(n_angles: usize, n_dets: usize, n_bins: usize) -> Self {
        Self::filled(n_angles, n_dets, n_bins, 0.0)
    }

    pub fn filled(n_angles: usize, n_dets: usize, n_bins: usize, value: f64) -> Self {
        Self {
            n_angles,
            n_dets,
            n_bins,
            data: vec![value; n_angles * n_dets * n_bins],
        }
    }

    pub fn from_vec(n_angles: usize, n_dets: usize, n_bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_angles * n_dets * n_bins {
            return Err(Error::Config(format!(
                "sinogram {n_angles}x{n_dets}x{n_bins} needs {} values, got {}",
                n_angles * n_dets * n_bins,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sinogram entry {i}")));
        }
        Ok(Self {
            n_angles,
            n_dets,
            n_bins,
            data,
        })
    }

    #[inline]
    pub fn index(&self, angle: usize, det: usize, bin: usize) -> usize {
        (angle * self.n_dets + det) * self.n_bins + bin
    }

    pub fn rays(&self) -> usize {
        self.n_angles * self.n_dets
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_angles == other.n_angles && self.n_dets == other.n_dets && self.n_bins == other.n_bins
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(path, &[self.n_angles, self.n_dets, self.n_bins], &self.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dims, data) = read_tensor(path)?;
        match dims.as_slice() {
            [a, d, b] => Self::from_vec(*a, *d, *b, data),
            _ => Err(Error::format(path, format!("expected 3 dims, found {dims:?}"))),
        }
    }
}
