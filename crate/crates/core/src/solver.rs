//! One-step iterative material reconstruction (CP-fast) and the partial
//! reconstructions built on it.
//!
//! The iteration, started from `x = 0`, is
//!
//! ```text
//! x ← x − s_k · Rᵀ (log y − log A(x)) (U‡)ᵀ
//! ```
//!
//! i.e. a Landweber step in line-integral space preconditioned by the
//! pseudoinverse of the linearized spectral matrix `U = S·Mmat`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::partition::SubsetKind;
use crate::radon::{Geometry, Projector};
use crate::spectral::{log_ratio, ForwardModel, SpectralModel};
use crate::types::{MaterialImage, SpectralSinogram};

/// Step as a fraction of `1/‖RᵀR‖`, chosen by [`bracket_step`] on a
/// validation phantom and frozen here.
pub const DEFAULT_RELATIVE_STEP: f64 = 1.6;
pub const DEFAULT_ITERS: usize = 200;

const POWER_ITERATIONS: usize = 30;
/// Iterates beyond this magnitude are treated as divergence; the exponent
/// clamp in `Φ` otherwise keeps a runaway iteration finite.
pub const DIVERGENCE_BOUND: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub enum StepSchedule {
    /// The same absolute step every iteration.
    Constant(f64),
    /// Absolute step per iteration; must cover all iterations.
    List(Vec<f64>),
    /// `factor / λ_max(RᵀR)` of the geometry being solved.
    Relative(f64),
}

impl StepSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "auto" {
            return Ok(StepSchedule::Relative(DEFAULT_RELATIVE_STEP));
        }
        if let Some(rest) = s.strip_prefix("relative:") {
            return parse_positive(rest).map(StepSchedule::Relative);
        }
        if s.contains(',') {
            let list = s.split(',').map(parse_positive).collect::<Result<Vec<_>>>()?;
            return Ok(StepSchedule::List(list));
        }
        parse_positive(s).map(StepSchedule::Constant)
    }

    pub fn to_config_string(&self) -> String {
        match self {
            StepSchedule::Relative(f) if *f == DEFAULT_RELATIVE_STEP => "auto".into(),
            StepSchedule::Relative(f) => format!("relative:{f}"),
            StepSchedule::Constant(s) => s.to_string(),
            StepSchedule::List(l) => l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        }
    }
}

fn parse_positive(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid step `{s}`")))?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Config(format!("step {v} must be positive")));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub iters: usize,
    pub step: StepSchedule,
    pub record_residuals: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iters: DEFAULT_ITERS,
            step: StepSchedule::Relative(DEFAULT_RELATIVE_STEP),
            record_residuals: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("solver needs at least one iteration".into()));
        }
        if let StepSchedule::List(l) = &self.step {
            if l.len() < self.iters {
                return Err(Error::Config(format!(
                    "step list has {} entries for {} iterations",
                    l.len(),
                    self.iters
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: MaterialImage,
    /// `‖log A(x⁽ᵏ⁾) − log y‖` for `k = 0..=K` when recording was requested.
    pub residuals: Vec<f64>,
}

impl Reconstruction {
    pub fn write_trace(&self, path: impl AsRef<Path>) -> Result<()> {
        write_residual_csv(path, &self.residuals)
    }
}

pub fn write_residual_csv(path: impl AsRef<Path>, residuals: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("iter,residual\n");
    for (k, r) in residuals.iter().enumerate() {
        writeln!(s, "{k},{r}").unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Cached `λ_max(RᵀR)` per projector, keyed by the geometry.
fn norm_squared(projector: &Projector) -> f64 {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    let g = projector.geometry();
    let key = format!(
        "{}:{}:{:?}",
        g.size,
        g.n_dets,
        g.angles.iter().map(|a| a.to_bits()).collect::<Vec<_>>()
    );
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&v) = cache.lock().unwrap().get(&key) {
        return v;
    }
    let v = projector.operator_norm_squared(POWER_ITERATIONS);
    cache.lock().unwrap().insert(key, v);
    v
}

fn step_at(schedule: &StepSchedule, k: usize, projector: &Projector) -> f64 {
    match schedule {
        StepSchedule::Constant(s) => *s,
        StepSchedule::List(l) => l[k],
        StepSchedule::Relative(f) => f / norm_squared(projector),
    }
}

/// CP-fast on a prepared forward model.
pub fn cp_fast_with(fm: &ForwardModel, y: &SpectralSinogram, cfg: &SolverConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let g = fm.geometry();
    let model = &fm.model;
    if y.n_angles != g.n_angles() || y.n_dets != g.n_dets || y.n_bins != model.n_bins {
        return Err(Error::Config(format!(
            "measurement {}x{}x{} does not match geometry {}x{}x{}",
            y.n_angles,
            y.n_dets,
            y.n_bins,
            g.n_angles(),
            g.n_dets,
            model.n_bins
        )));
    }
    if let Some(i) = y.data.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("measurement entry {i} is NaN")));
    }
    let m = model.n_materials;
    let b = model.n_bins;
    let mut x = MaterialImage::zeros(m, g.size, g.size);
    let mut residuals = Vec::new();
    let mut update = vec![0.0; g.rays() * m];
    for k in 0..cfg.iters {
        let ax = fm.forward(&x);
        let r = log_ratio(&ax.data, &y.data);
        if cfg.record_residuals {
            residuals.push(r.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        // Per ray (log A − log y)·(U‡)ᵀ ≈ R(x* − x) near the solution.
        for (ray, out) in update.chunks_exact_mut(m).enumerate() {
            let rr = &r[ray * b..(ray + 1) * b];
            for (mm, o) in out.iter_mut().enumerate() {
                let row = &model.u_pinv[mm * b..(mm + 1) * b];
                *o = row.iter().zip(rr).map(|(p, v)| p * v).sum::<f64>();
            }
        }
        let grad = fm.projector.backproject_stack(&update, m);
        let s = step_at(&cfg.step, k, &fm.projector);
        for (xv, gv) in x.data.iter_mut().zip(&grad.data) {
            *xv += s * gv;
        }
        if !x.data.iter().all(|v| v.abs() <= DIVERGENCE_BOUND) {
            return Err(Error::SolverDiverged { iteration: k + 1 });
        }
    }
    if cfg.record_residuals {
        let ax = fm.forward(&x);
        let r = log_ratio(&ax.data, &y.data);
        residuals.push(r.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(Reconstruction { image: x, residuals })
}

pub fn cp_fast(
    model: &SpectralModel,
    geom: &Geometry,
    y: &SpectralSinogram,
    cfg: &SolverConfig,
) -> Result<Reconstruction> {
    cp_fast_with(&ForwardModel::new(model.clone(), geom), y, cfg)
}

/// Fills detector columns missing from `y_subset` by linear interpolation
/// between the nearest kept columns; edges replicate the nearest kept column.
pub fn interpolate_detectors(y_subset: &SpectralSinogram, kept: &[usize], n_dets: usize) -> SpectralSinogram {
    assert_eq!(y_subset.n_dets, kept.len(), "kept detector list does not match data");
    assert!(!kept.is_empty(), "no detectors kept");
    assert!(kept.windows(2).all(|w| w[0] < w[1]) && *kept.last().unwrap() < n_dets);
    let bins = y_subset.n_bins;
    let mut out = SpectralSinogram::zeros(y_subset.n_angles, n_dets, bins);
    // For every full detector: (left kept slot, right kept slot, weight of right).
    let mut plan = Vec::with_capacity(n_dets);
    let mut next = 0usize;
    for d in 0..n_dets {
        while next < kept.len() && kept[next] < d {
            next += 1;
        }
        let entry = if next < kept.len() && kept[next] == d {
            (next, next, 0.0)
        } else if next == 0 {
            (0, 0, 0.0)
        } else if next == kept.len() {
            (next - 1, next - 1, 0.0)
        } else {
            let (l, r) = (kept[next - 1], kept[next]);
            (next - 1, next, (d - l) as f64 / (r - l) as f64)
        };
        plan.push(entry);
    }
    for a in 0..y_subset.n_angles {
        for (d, &(l, r, t)) in plan.iter().enumerate() {
            for bin in 0..bins {
                let yl = y_subset.data[y_subset.index(a, l, bin)];
                let v = if l == r {
                    yl
                } else {
                    let yr = y_subset.data[y_subset.index(a, r, bin)];
                    yl + t * (yr - yl)
                };
                let idx = out.index(a, d, bin);
                out.data[idx] = v;
            }
        }
    }
    out
}

/// Reconstruction from one measurement subset.
///
/// Angular subsets run CP-fast on the angle-restricted geometry; detector
/// subsets are first completed by interpolation and then solved on the full
/// geometry.
pub fn partial_reconstruction_with(
    fm_full: &ForwardModel,
    fm_subset: Option<&ForwardModel>,
    y_subset: &SpectralSinogram,
    subset: &SubsetKind,
    cfg: &SolverConfig,
) -> Result<MaterialImage> {
    let g = fm_full.geometry();
    match subset {
        SubsetKind::Angular(_) => {
            let indices = subset.indices(g.n_angles());
            let owned;
            let fm = match fm_subset {
                Some(f) => f,
                None => {
                    owned = fm_full.restricted(&indices);
                    &owned
                }
            };
            Ok(cp_fast_with(fm, y_subset, cfg)?.image)
        }
        SubsetKind::Detector(_) => {
            let kept = subset.indices(g.n_dets);
            let full = interpolate_detectors(y_subset, &kept, g.n_dets);
            Ok(cp_fast_with(fm_full, &full, cfg)?.image)
        }
    }
}

pub fn partial_reconstruction(
    model: &SpectralModel,
    geom_full: &Geometry,
    y_subset: &SpectralSinogram,
    subset: &SubsetKind,
    cfg: &SolverConfig,
) -> Result<MaterialImage> {
    let fm = ForwardModel::new(model.clone(), geom_full);
    partial_reconstruction_with(&fm, None, y_subset, subset, cfg)
}

/// Plain Landweber iteration for `R x = b` from `x = 0`.
pub fn landweber(projector: &Projector, b: &[f64], iters: usize, step: &StepSchedule) -> Vec<f64> {
    let mut x = vec![0.0; projector.geometry().pixels()];
    for k in 0..iters {
        let rx = projector.project(&x);
        let r: Vec<f64> = b.iter().zip(&rx).map(|(bb, v)| bb - v).collect();
        let g = projector.backproject(&r);
        let s = step_at(step, k, projector);
        for (xv, gv) in x.iter_mut().zip(&g) {
            *xv += s * gv;
        }
    }
    x
}

/// Largest relative step on `factors` (tried in ascending order) whose
/// residual trace is finite and non-increasing over `iters` iterations.
pub fn bracket_step(fm: &ForwardModel, y: &SpectralSinogram, iters: usize, factors: &[f64]) -> Option<f64> {
    let mut best = None;
    for &f in factors {
        let cfg = SolverConfig {
            iters,
            step: StepSchedule::Relative(f),
            record_residuals: true,
        };
        match cp_fast_with(fm, y, &cfg) {
            Ok(rec) if rec.residuals.windows(2).all(|w| w[1] <= w[0]) => best = Some(f),
            _ => break,
        }
    }
    best
}
