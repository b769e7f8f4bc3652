//! Parallel-beam discrete Radon transform with Joseph's interpolation.
//!
//! Each ray is discretized once into a sparse row of `(pixel, weight)`
//! pairs; `project` applies the rows and `backproject` applies their exact
//! transpose. Pixel centres sit on a unit grid centred on the image, the
//! detector array is centred on the same point with unit pitch.

use std::f64::consts::PI;

use crate::types::MaterialImage;

/// Detector count used for an `n × n` image: `ceil(n·√2)`, bumped to odd.
pub fn default_detector_count(size: usize) -> usize {
    let d = (size as f64 * std::f64::consts::SQRT_2).ceil() as usize;
    if d % 2 == 0 {
        d + 1
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    /// Image side length `H = W` in pixels.
    pub size: usize,
    /// Projection angles in radians, strictly increasing in `[0, π)`.
    pub angles: Vec<f64>,
    pub n_dets: usize,
}

impl Geometry {
    /// `n_angles` uniform angles `a·π/n_angles` and the default detector count.
    pub fn new(size: usize, n_angles: usize) -> Self {
        assert!(n_angles >= 1, "need at least one angle");
        let angles = (0..n_angles)
            .map(|a| a as f64 * PI / n_angles as f64)
            .collect();
        Self::with_angles(size, angles, default_detector_count(size))
    }

    pub fn with_angles(size: usize, angles: Vec<f64>, n_dets: usize) -> Self {
        assert!(size >= 2, "image size must be at least 2");
        assert!(!angles.is_empty(), "need at least one angle");
        assert!(
            angles.windows(2).all(|w| w[0] < w[1]),
            "angles must be strictly increasing"
        );
        assert!(
            angles.iter().all(|&a| (0.0..PI).contains(&a)),
            "angles must lie in [0, pi)"
        );
        let min_dets = (size as f64 * std::f64::consts::SQRT_2).ceil() as usize;
        assert!(
            n_dets >= min_dets,
            "{n_dets} detectors do not cover the image diagonal ({min_dets} needed)"
        );
        Self {
            size,
            angles,
            n_dets,
        }
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn rays(&self) -> usize {
        self.angles.len() * self.n_dets
    }

    /// Keeps only the listed angles (strictly increasing indices).
    pub fn restrict(&self, angle_indices: &[usize]) -> Geometry {
        assert!(!angle_indices.is_empty(), "empty angle restriction");
        assert!(
            angle_indices.windows(2).all(|w| w[0] < w[1]),
            "angle indices must be strictly increasing"
        );
        assert!(
            *angle_indices.last().unwrap() < self.angles.len(),
            "angle index out of range"
        );
        Geometry {
            size: self.size,
            angles: angle_indices.iter().map(|&i| self.angles[i]).collect(),
            n_dets: self.n_dets,
        }
    }

    /// Offset of detector `d` from the centre, in pixels.
    #[inline]
    pub fn detector_offset(&self, d: usize) -> f64 {
        d as f64 - (self.n_dets as f64 - 1.0) / 2.0
    }
}

/// Free-function form of [`Geometry::restrict`].
pub fn restrict_geometry(geom: &Geometry, angle_indices: &[usize]) -> Geometry {
    geom.restrict(angle_indices)
}

/// Appends the Joseph row for one ray to `cols`/`weights`.
fn joseph_row(size: usize, theta: f64, s: f64, cols: &mut Vec<u32>, weights: &mut Vec<f64>) {
    let (sin, cos) = theta.sin_cos();
    let half = (size as f64 - 1.0) / 2.0;
    let mut push = |i: usize, j: usize, w: f64| {
        if w != 0.0 {
            cols.push((i * size + j) as u32);
            weights.push(w);
        }
    };
    if cos.abs() >= sin.abs() {
        // One sample per image row, interpolating between columns.
        let scale = 1.0 / cos.abs();
        for i in 0..size {
            let y = half - i as f64;
            let fx = (s - y * sin) / cos + half;
            let j0 = fx.floor();
            let t = fx - j0;
            let j0 = j0 as isize;
            if j0 >= 0 && (j0 as usize) < size {
                push(i, j0 as usize, (1.0 - t) * scale);
            }
            if j0 + 1 >= 0 && ((j0 + 1) as usize) < size {
                push(i, (j0 + 1) as usize, t * scale);
            }
        }
    } else {
        // One sample per image column, interpolating between rows.
        let scale = 1.0 / sin.abs();
        for j in 0..size {
            let x = j as f64 - half;
            let y = (s - x * cos) / sin;
            let fi = half - y;
            let i0 = fi.floor();
            let t = fi - i0;
            let i0 = i0 as isize;
            if i0 >= 0 && (i0 as usize) < size {
                push(i0 as usize, j, (1.0 - t) * scale);
            }
            if i0 + 1 >= 0 && ((i0 + 1) as usize) < size {
                push((i0 + 1) as usize, j, t * scale);
            }
        }
    }
}

/// Sparse system matrix for one geometry, one row per ray (angle-major).
#[derive(Debug, Clone)]
pub struct Projector {
    geom: Geometry,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl Projector {
    pub fn new(geom: &Geometry) -> Self {
        let mut offsets = Vec::with_capacity(geom.rays() + 1);
        let mut cols = Vec::with_capacity(geom.rays() * geom.size * 2);
        let mut weights = Vec::with_capacity(geom.rays() * geom.size * 2);
        offsets.push(0);
        for &theta in &geom.angles {
            for d in 0..geom.n_dets {
                joseph_row(geom.size, theta, geom.detector_offset(d), &mut cols, &mut weights);
                offsets.push(cols.len());
            }
        }
        Self {
            geom: geom.clone(),
            offsets,
            cols,
            weights,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    /// Pixels and weights touched by ray `(angle, det)`.
    pub fn ray(&self, angle: usize, det: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = angle * self.geom.n_dets + det;
        let span = self.offsets[r]..self.offsets[r + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.weights[span])
            .map(|(&c, &w)| (c as usize, w))
    }

    /// Single-channel projection, output `P1 × P2`.
    pub fn project(&self, img: &[f64]) -> Vec<f64> {
        assert_eq!(img.len(), self.geom.pixels(), "image does not match geometry");
        let mut out = vec![0.0; self.geom.rays()];
        for (r, o) in out.iter_mut().enumerate() {
            let span = self.offsets[r]..self.offsets[r + 1];
            let mut acc = 0.0;
            for (&c, &w) in self.cols[span.clone()].iter().zip(&self.weights[span]) {
                acc += w * img[c as usize];
            }
            *o = acc;
        }
        out
    }

    /// Transpose of [`Projector::project`].
    pub fn backproject(&self, sino: &[f64]) -> Vec<f64> {
        assert_eq!(sino.len(), self.geom.rays(), "sinogram does not match geometry");
        let mut img = vec![0.0; self.geom.pixels()];
        for (r, &v) in sino.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let span = self.offsets[r]..self.offsets[r + 1];
            for (&c, &w) in self.cols[span.clone()].iter().zip(&self.weights[span]) {
                img[c as usize] += w * v;
            }
        }
        img
    }

    /// Channel-wise projection; output is `P1 × P2 × M` with the channel last.
    pub fn project_stack(&self, img: &MaterialImage) -> Vec<f64> {
        assert_eq!(img.height, self.geom.size, "image height does not match geometry");
        assert_eq!(img.width, self.geom.size, "image width does not match geometry");
        let m = img.materials;
        let n = img.pixels();
        let mut out = vec![0.0; self.geom.rays() * m];
        let mut acc = vec![0.0; m];
        for r in 0..self.geom.rays() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let span = self.offsets[r]..self.offsets[r + 1];
            for (&c, &w) in self.cols[span.clone()].iter().zip(&self.weights[span]) {
                let c = c as usize;
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += w * img.data[k * n + c];
                }
            }
            out[r * m..(r + 1) * m].copy_from_slice(&acc);
        }
        out
    }

    /// Transpose of [`Projector::project_stack`] for a `P1 × P2 × M` array.
    pub fn backproject_stack(&self, sino: &[f64], materials: usize) -> MaterialImage {
        assert_eq!(
            sino.len(),
            self.geom.rays() * materials,
            "sinogram stack does not match geometry"
        );
        let n = self.geom.pixels();
        let mut img = MaterialImage::zeros(materials, self.geom.size, self.geom.size);
        for r in 0..self.geom.rays() {
            let vals = &sino[r * materials..(r + 1) * materials];
            if vals.iter().all(|&v| v == 0.0) {
                continue;
            }
            let span = self.offsets[r]..self.offsets[r + 1];
            for (&c, &w) in self.cols[span.clone()].iter().zip(&self.weights[span]) {
                let c = c as usize;
                for (k, &v) in vals.iter().enumerate() {
                    img.data[k * n + c] += w * v;
                }
            }
        }
        img
    }

    /// Largest eigenvalue of `RᵀR` by power iteration from a fixed start.
    pub fn operator_norm_squared(&self, iterations: usize) -> f64 {
        let n = self.geom.pixels();
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            let w = self.backproject(&self.project(&v));
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        lambda
    }
}

/// One-shot projection of a single-channel image.
pub fn project(geom: &Geometry, img: &[f64]) -> Vec<f64> {
    Projector::new(geom).project(img)
}

/// One-shot matched backprojection of a single-channel sinogram.
pub fn backproject(geom: &Geometry, sino: &[f64]) -> Vec<f64> {
    Projector::new(geom).backproject(sino)
}

pub fn project_stack(geom: &Geometry, img: &MaterialImage) -> Vec<f64> {
    Projector::new(geom).project_stack(img)
}

pub fn backproject_stack(geom: &Geometry, sino: &[f64], materials: usize) -> MaterialImage {
    Projector::new(geom).backproject_stack(sino, materials)
}
