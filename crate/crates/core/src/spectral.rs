//! Polychromatic measurement model: per-ray nonlinearity, full forward map,
//! its Jacobian and the material-space preconditioner.
//!
//! For line integrals `z ∈ R^M` of one ray the bin intensities are
//!
//! ```text
//! Φ_b(z) = Σ_i S[b,i] · exp(−Σ_m Mmat[i,m] · z[m])
//! ```
//!
//! with spectra rows normalized to one, so `Φ(0) = 1`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::radon::{Geometry, Projector};
use crate::tensor::{read_tensor, write_tensor};
use crate::types::{MaterialImage, SpectralSinogram};

/// Floor applied to measurements (and predictions) before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-6;

/// Largest exponent argument passed to `exp`; larger values mean strongly
/// negative line integrals and are flagged as non-physical.
pub const MAX_EXPONENT: f64 = 50.0;

/// Relative singular-value cutoff for the pseudoinverse.
pub const PINV_CUTOFF: f64 = 1e-10;

static CLAMP_REPORTED: AtomicBool = AtomicBool::new(false);

pub const MATERIAL_NAMES: [&str; 3] = ["water", "iodine", "gadolinium"];

const IODINE_K_EDGE_KEV: f64 = 33.2;
const GADOLINIUM_K_EDGE_KEV: f64 = 50.2;
const MAX_ENERGY_KEV: f64 = 150.0;
/// Bin edges (keV) of the default five-bin acquisition; the second and third
/// bins start just above the two K-edges.
const FIVE_BIN_EDGES: [f64; 6] = [20.0, 34.0, 51.0, 70.0, 95.0, 150.0];
/// Softness (keV) of the logistic bin windows.
const BIN_EDGE_WIDTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel {
    /// Energy nodes in keV, length `E`.
    pub energies: Vec<f64>,
    pub n_bins: usize,
    pub n_materials: usize,
    /// Effective spectra, `B × E`, rows sum to one.
    pub spectra: Vec<f64>,
    /// Attenuation per unit density and unit length, `E × M`.
    pub attenuation: Vec<f64>,
    /// `S · Mmat`, `B × M`.
    pub u: Vec<f64>,
    /// Moore–Penrose pseudoinverse of `u`, `M × B`.
    pub u_pinv: Vec<f64>,
}

impl SpectralModel {
    /// Builds a model from explicit tables and precomputes `U` and `U‡`.
    pub fn from_tables(
        energies: Vec<f64>,
        n_bins: usize,
        n_materials: usize,
        spectra: Vec<f64>,
        attenuation: Vec<f64>,
    ) -> Result<Self> {
        let e = energies.len();
        if e == 0 || n_bins == 0 || n_materials == 0 {
            return Err(Error::Config("spectral model dimensions must be positive".into()));
        }
        if spectra.len() != n_bins * e || attenuation.len() != e * n_materials {
            return Err(Error::Config("spectral table sizes do not match dimensions".into()));
        }
        if n_bins < n_materials {
            return Err(Error::Config(format!(
                "need at least as many bins as materials (B={n_bins}, M={n_materials})"
            )));
        }
        if spectra.iter().chain(&attenuation).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("spectral tables must be finite and nonnegative".into()));
        }
        for b in 0..n_bins {
            let sum: f64 = spectra[b * e..(b + 1) * e].iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("spectrum row {b} sums to {sum}, not 1")));
            }
        }
        let s = DMatrix::from_row_slice(n_bins, e, &spectra);
        let mu = DMatrix::from_row_slice(e, n_materials, &attenuation);
        let u = &s * &mu;
        let u_pinv = pseudo_inverse(&u)?;
        Ok(Self {
            energies,
            n_bins,
            n_materials,
            spectra,
            attenuation,
            u: row_major(&u),
            u_pinv: row_major(&u_pinv),
        })
    }

    pub fn n_energies(&self) -> usize {
        self.energies.len()
    }

    /// `Φ` for one ray. Returns `true` when an exponent had to be clamped.
    pub fn phi_into(&self, z: &[f64], out: &mut [f64], scratch: &mut [f64]) -> bool {
        let m = self.n_materials;
        let e = self.n_energies();
        debug_assert_eq!(z.len(), m);
        debug_assert_eq!(out.len(), self.n_bins);
        let mut clamped = false;
        for (i, t) in scratch[..e].iter_mut().enumerate() {
            let mu = &self.attenuation[i * m..(i + 1) * m];
            let mut arg = 0.0;
            for (a, zz) in mu.iter().zip(z) {
                arg -= a * zz;
            }
            if arg > MAX_EXPONENT {
                arg = MAX_EXPONENT;
                clamped = true;
            }
            *t = arg.exp();
        }
        for (b, o) in out.iter_mut().enumerate() {
            let row = &self.spectra[b * e..(b + 1) * e];
            *o = row.iter().zip(&scratch[..e]).map(|(s, t)| s * t).sum();
        }
        clamped
    }

    /// `Φ(z)` for one ray of `M` line integrals.
    pub fn phi(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n_materials, "line integral vector has wrong length");
        let mut out = vec![0.0; self.n_bins];
        let mut scratch = vec![0.0; self.n_energies()];
        if self.phi_into(z, &mut out, &mut scratch) {
            warn!("exponent clamped in phi: input line integrals are non-physical");
        }
        out
    }

    /// `∂Φ_b/∂z_m` for one ray, `B × M` row-major.
    pub fn phi_jacobian_into(&self, z: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let m = self.n_materials;
        let e = self.n_energies();
        for (i, t) in scratch[..e].iter_mut().enumerate() {
            let mu = &self.attenuation[i * m..(i + 1) * m];
            let arg: f64 = -mu.iter().zip(z).map(|(a, zz)| a * zz).sum::<f64>();
            *t = arg.min(MAX_EXPONENT).exp();
        }
        for b in 0..self.n_bins {
            let row = &self.spectra[b * e..(b + 1) * e];
            for k in 0..m {
                let mut acc = 0.0;
                for i in 0..e {
                    acc += row[i] * self.attenuation[i * m + k] * scratch[i];
                }
                out[b * m + k] = -acc;
            }
        }
    }

    pub fn phi_jacobian(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n_materials, "line integral vector has wrong length");
        let mut out = vec![0.0; self.n_bins * self.n_materials];
        let mut scratch = vec![0.0; self.n_energies()];
        self.phi_jacobian_into(z, &mut out, &mut scratch);
        out
    }

    /// Applies `Φ` to a `rays × M` array of line integrals, giving `rays × B`.
    pub fn phi_rays(&self, z: &[f64]) -> Vec<f64> {
        let m = self.n_materials;
        let b = self.n_bins;
        assert_eq!(z.len() % m, 0);
        let rays = z.len() / m;
        let mut out = vec![0.0; rays * b];
        let mut scratch = vec![0.0; self.n_energies()];
        let mut clamped = 0usize;
        for r in 0..rays {
            if self.phi_into(&z[r * m..(r + 1) * m], &mut out[r * b..(r + 1) * b], &mut scratch) {
                clamped += 1;
            }
        }
        if clamped > 0 {
            if CLAMP_REPORTED.swap(true, Ordering::Relaxed) {
                debug!("exponent clamped on {clamped} rays");
            } else {
                warn!("exponent clamped on {clamped} rays: line integrals are non-physical (further reports at debug level)");
            }
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (e, b, m) = (self.n_energies(), self.n_bins, self.n_materials);
        write_tensor(dir.join("spectra.splt"), &[b, e], &self.spectra)?;
        write_tensor(dir.join("attenuation.splt"), &[e, m], &self.attenuation)?;
        write_tensor(dir.join("u.splt"), &[b, m], &self.u)?;
        write_tensor(dir.join("u_pinv.splt"), &[m, b], &self.u_pinv)?;
        let mut meta = String::new();
        writeln!(meta, "energies = {e}").unwrap();
        writeln!(meta, "bins = {b}").unwrap();
        writeln!(meta, "materials = {m}").unwrap();
        let nodes: Vec<String> = self.energies.iter().map(|v| v.to_string()).collect();
        writeln!(meta, "energy_nodes_kev = {}", nodes.join(",")).unwrap();
        let path = dir.join("spectral.txt");
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }

    /// Reads a bundle written by [`SpectralModel::save`]. The stored `U` and
    /// `U‡` are taken as-is rather than recomputed.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("spectral.txt");
        let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let energies: Vec<f64> = meta
            .lines()
            .find_map(|l| l.strip_prefix("energy_nodes_kev = "))
            .ok_or_else(|| Error::format(&meta_path, "missing energy_nodes_kev"))?
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let (sd, spectra) = read_tensor(dir.join("spectra.splt"))?;
        let (_, attenuation) = read_tensor(dir.join("attenuation.splt"))?;
        let (ud, u) = read_tensor(dir.join("u.splt"))?;
        let (_, u_pinv) = read_tensor(dir.join("u_pinv.splt"))?;
        Ok(Self {
            energies,
            n_bins: sd[0],
            n_materials: ud[1],
            spectra,
            attenuation,
            u,
            u_pinv,
        })
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn pseudo_inverse(u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = u.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = PINV_CUTOFF * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    if rank < u.ncols() {
        return Err(Error::Config(format!(
            "U = S·Mmat is rank deficient (rank {rank} < {} materials)",
            u.ncols()
        )));
    }
    let left = svd.u.as_ref().expect("svd computed with u");
    let right_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut sigma_inv = DMatrix::zeros(right_t.nrows(), left.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            sigma_inv[(k, k)] = 1.0 / s;
        }
    }
    Ok(right_t.transpose() * sigma_inv * left.transpose())
}

/// Effective spectra carry no weight below this energy (source filtration).
pub const FILTRATION_CUTOFF_KEV: f64 = 15.0;

/// Pixel length in the length unit of the attenuation curves.
pub const PIXEL_LENGTH: f64 = 0.05;

fn water_attenuation(e: f64) -> f64 {
    PIXEL_LENGTH * (0.05 + 0.12 * (30.0 / e).powi(3))
}

fn contrast_attenuation(e: f64, edge_node: f64, scale: f64) -> f64 {
    let jump = if e >= edge_node { 6.0 } else { 1.0 };
    PIXEL_LENGTH * (0.02 + scale * (edge_node / e).powi(3) * jump)
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Synthetic tables with physically placed K-edges.
///
/// Energies are `E` uniform nodes in `(0, 150]` keV. Water follows a
/// power-law-plus-constant curve; iodine and gadolinium add a sixfold jump at
/// the node nearest their K-edge. Bins are smooth logistic windows cut off below
/// [`FILTRATION_CUTOFF_KEV`], rows normalized to one. Attenuation is per unit density per pixel, see
/// [`PIXEL_LENGTH`].
pub fn build_default_model(n_energies: usize, n_bins: usize, n_materials: usize) -> Result<SpectralModel> {
    if n_materials == 0 || n_materials > MATERIAL_NAMES.len() {
        return Err(Error::Config(format!(
            "default model supports 1..=3 materials, got {n_materials}"
        )));
    }
    if n_bins < n_materials || n_energies < n_bins {
        return Err(Error::Config(format!(
            "need E >= B >= M, got E={n_energies} B={n_bins} M={n_materials}"
        )));
    }
    let energies: Vec<f64> = (1..=n_energies)
        .map(|i| MAX_ENERGY_KEV * i as f64 / n_energies as f64)
        .collect();
    let nearest = |target: f64| {
        energies
            .iter()
            .copied()
            .min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()))
            .unwrap()
    };
    let iodine_edge = nearest(IODINE_K_EDGE_KEV);
    let gadolinium_edge = nearest(GADOLINIUM_K_EDGE_KEV);

    let mut attenuation = Vec::with_capacity(n_energies * n_materials);
    for &e in &energies {
        let row = [
            water_attenuation(e),
            contrast_attenuation(e, iodine_edge, 0.3),
            contrast_attenuation(e, gadolinium_edge, 0.3),
        ];
        attenuation.extend_from_slice(&row[..n_materials]);
    }

    let edges: Vec<f64> = if n_bins == 5 {
        FIVE_BIN_EDGES.to_vec()
    } else {
        (0..=n_bins)
            .map(|k| 20.0 + (MAX_ENERGY_KEV - 20.0) * k as f64 / n_bins as f64)
            .collect()
    };
    let mut spectra = Vec::with_capacity(n_bins * n_energies);
    for b in 0..n_bins {
        let (lo, hi) = (edges[b], edges[b + 1]);
        let row: Vec<f64> = energies
            .iter()
            .map(|&e| {
                if e < FILTRATION_CUTOFF_KEV {
                    0.0
                } else {
                    logistic((e - lo) / BIN_EDGE_WIDTH) * logistic((hi - e) / BIN_EDGE_WIDTH)
                }
            })
            .collect();
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config(format!("energy bin {b} has no support")));
        }
        spectra.extend(row.iter().map(|w| w / total));
    }
    SpectralModel::from_tables(energies, n_bins, n_materials, spectra, attenuation)
}

/// `A = Φ ∘ R` with a cached projector.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub model: SpectralModel,
    pub projector: Projector,
}

impl ForwardModel {
    pub fn new(model: SpectralModel, geom: &Geometry) -> Self {
        Self {
            model,
            projector: Projector::new(geom),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        self.projector.geometry()
    }

    /// Same spectral model on an angle-restricted geometry.
    pub fn restricted(&self, angle_indices: &[usize]) -> Self {
        Self::new(self.model.clone(), &self.geometry().restrict(angle_indices))
    }

    /// Line integrals `R x`, shape `rays × M`.
    pub fn line_integrals(&self, x: &MaterialImage) -> Vec<f64> {
        assert_eq!(x.materials, self.model.n_materials, "material count mismatch");
        self.projector.project_stack(x)
    }

    pub fn forward(&self, x: &MaterialImage) -> SpectralSinogram {
        let z = self.line_integrals(x);
        let g = self.geometry();
        SpectralSinogram {
            n_angles: g.n_angles(),
            n_dets: g.n_dets,
            n_bins: self.model.n_bins,
            data: self.model.phi_rays(&z),
        }
    }

    /// `log A(x) − log max(y, ε)`; also returns `A(x)`.
    pub fn log_residual(&self, x: &MaterialImage, y: &SpectralSinogram) -> (Vec<f64>, SpectralSinogram) {
        let ax = self.forward(x);
        assert!(ax.same_shape(y), "measurement shape does not match geometry");
        (log_ratio(&ax.data, &y.data), ax)
    }
}

/// Pointwise `log max(a, f64::MIN_POSITIVE) − log max(y, ε)`.
pub(crate) fn log_ratio(a: &[f64], y: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(y)
        .map(|(&a, &y)| a.max(f64::MIN_POSITIVE).ln() - y.max(LOG_FLOOR).ln())
        .collect()
}

pub fn phi(model: &SpectralModel, z: &[f64]) -> Vec<f64> {
    model.phi(z)
}

pub fn phi_jacobian(model: &SpectralModel, z: &[f64]) -> Vec<f64> {
    model.phi_jacobian(z)
}

pub fn forward(model: &SpectralModel, geom: &Geometry, x: &MaterialImage) -> SpectralSinogram {
    ForwardModel::new(model.clone(), geom).forward(x)
}

/// `log A(x) − log max(y, ε)`, shape `P1 × P2 × B`.
pub fn log_forward_residual(
    model: &SpectralModel,
    geom: &Geometry,
    x: &MaterialImage,
    y: &SpectralSinogram,
) -> Result<Vec<f64>> {
    if let Some(i) = y.data.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("measurement entry {i} is NaN")));
    }
    Ok(ForwardModel::new(model.clone(), geom).log_residual(x, y).0)
}
