//! Monte Carlo checks of the split-loss identity
//! `E[loss on noisy targets] = E[loss on clean targets] + E‖η‖²`.
//!
//! Every draw re-reconstructs the complement data, so the independence of the
//! network input from the evaluated noise is exercised rather than assumed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::noise::{apply_noise, NoiseConfig, NoiseKind};
use crate::partition::{restrict, PartitionScheme, SubsetKind, SubsetOperators};
use crate::radon::Projector;
use crate::rng::RngStream;
use crate::solver::{interpolate_detectors, landweber, partial_reconstruction_with, SolverConfig, StepSchedule};
use crate::types::{MaterialImage, SpectralSinogram};

/// Pass threshold in Monte Carlo standard errors.
pub const SE_MULTIPLE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub lhs: f64,
    pub sup: f64,
    pub noise_analytic: f64,
    pub gap: f64,
    pub se: f64,
    pub draws: usize,
}

impl GapReport {
    pub fn from_samples(lhs: &[f64], sup: &[f64], noise: f64) -> Self {
        let r = lhs.len();
        assert!(r >= 2 && sup.len() == r, "need at least two paired draws");
        let gaps: Vec<f64> = lhs.iter().zip(sup).map(|(l, s)| l - s - noise).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let gap = mean(&gaps);
        let var = gaps.iter().map(|g| (g - gap) * (g - gap)).sum::<f64>() / (r - 1) as f64;
        Self {
            lhs: mean(lhs),
            sup: mean(sup),
            noise_analytic: noise,
            gap,
            se: (var / r as f64).sqrt(),
            draws: r,
        }
    }

    pub fn pass(&self) -> bool {
        self.gap.abs() <= SE_MULTIPLE * self.se
    }

    pub fn to_csv(&self) -> String {
        format!(
            "lhs,sup,noise_analytic,gap,se,pass\n{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}\n",
            self.lhs,
            self.sup,
            self.noise_analytic,
            self.gap,
            self.se,
            self.pass()
        )
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "draws          {}", self.draws).unwrap();
        writeln!(s, "noisy loss     {:.6e}", self.lhs).unwrap();
        writeln!(s, "clean loss     {:.6e}", self.sup).unwrap();
        writeln!(s, "noise energy   {:.6e}", self.noise_analytic).unwrap();
        writeln!(s, "gap            {:.6e} (se {:.3e})", self.gap, self.se).unwrap();
        writeln!(s, "result         {}", if self.pass() { "pass" } else { "fail" }).unwrap();
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// A measurement model with a fixed partition and fixed partial reconstructions.
pub trait SplitProblem {
    fn scheme(&self) -> &PartitionScheme;
    /// Reconstruction from the packed data of one subset.
    fn reconstruct(&self, data: &SpectralSinogram, kind: SubsetKind) -> Result<MaterialImage>;
    /// Forward map restricted to one subset, packed.
    fn forward_subset(&self, x: &MaterialImage, kind: SubsetKind) -> SpectralSinogram;
}

/// Spectral problem `A = Φ∘R` with CP-fast partial reconstructions.
pub struct SpectralProblem<'a> {
    pub ops: &'a SubsetOperators,
    pub solver: SolverConfig,
}

impl SplitProblem for SpectralProblem<'_> {
    fn scheme(&self) -> &PartitionScheme {
        &self.ops.scheme
    }

    fn reconstruct(&self, data: &SpectralSinogram, kind: SubsetKind) -> Result<MaterialImage> {
        partial_reconstruction_with(&self.ops.full, self.ops.angular_model(kind), data, &kind, &self.solver)
    }

    fn forward_subset(&self, x: &MaterialImage, kind: SubsetKind) -> SpectralSinogram {
        self.ops.restricted_forward(x, kind)
    }
}

/// Linear problem `A = R` on one channel with Landweber partial reconstructions.
pub struct LinearProblem {
    pub full: Projector,
    pub scheme: PartitionScheme,
    angular: Vec<(SubsetKind, Projector)>,
    pub iters: usize,
    pub step: StepSchedule,
}

impl LinearProblem {
    pub fn new(full: Projector, scheme: PartitionScheme, iters: usize, step: StepSchedule) -> Self {
        let g = full.geometry().clone();
        assert_eq!(scheme.n_bins, 1, "linear problem has a single measurement channel");
        let mut angular = Vec::new();
        for (_, _, kind) in scheme.subsets() {
            for k in [kind, kind.complement()] {
                if matches!(k, SubsetKind::Angular(_)) && !angular.iter().any(|(q, _)| *q == k) {
                    angular.push((k, Projector::new(&g.restrict(&k.indices(g.n_angles())))));
                }
            }
        }
        Self {
            full,
            scheme,
            angular,
            iters,
            step,
        }
    }

    fn angular(&self, kind: SubsetKind) -> Option<&Projector> {
        self.angular.iter().find(|(k, _)| *k == kind).map(|(_, p)| p)
    }
}

impl SplitProblem for LinearProblem {
    fn scheme(&self) -> &PartitionScheme {
        &self.scheme
    }

    fn reconstruct(&self, data: &SpectralSinogram, kind: SubsetKind) -> Result<MaterialImage> {
        let g = self.full.geometry();
        let x = match self.angular(kind) {
            Some(p) => landweber(p, &data.data, self.iters, &self.step),
            None => {
                let full = interpolate_detectors(data, &kind.indices(g.n_dets), g.n_dets);
                landweber(&self.full, &full.data, self.iters, &self.step)
            }
        };
        MaterialImage::from_vec(1, g.size, g.size, x)
    }

    fn forward_subset(&self, x: &MaterialImage, kind: SubsetKind) -> SpectralSinogram {
        let g = self.full.geometry();
        let sino = match self.angular(kind) {
            Some(p) => {
                let a = p.geometry().n_angles();
                SpectralSinogram {
                    n_angles: a,
                    n_dets: g.n_dets,
                    n_bins: 1,
                    data: p.project(&x.data),
                }
            }
            None => restrict(
                &SpectralSinogram {
                    n_angles: g.n_angles(),
                    n_dets: g.n_dets,
                    n_bins: 1,
                    data: self.full.project(&x.data),
                },
                kind,
            ),
        };
        sino
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Noisy-target and clean-target split losses for one measurement.
fn split_losses(
    problem: &dyn SplitProblem,
    f: &dyn Fn(&MaterialImage) -> MaterialImage,
    clean: &SpectralSinogram,
    noisy: &SpectralSinogram,
) -> Result<(f64, f64)> {
    let scheme = problem.scheme();
    let k = scheme.k() as f64;
    let mut lhs = 0.0;
    let mut sup = 0.0;
    for (_, _, kind) in scheme.subsets() {
        let c = kind.complement();
        let input = problem.reconstruct(&restrict(noisy, c), c)?;
        let a = problem.forward_subset(&f(&input), kind);
        lhs += sq_dist(&a.data, &restrict(noisy, kind).data) / k;
        sup += sq_dist(&a.data, &restrict(clean, kind).data) / k;
    }
    Ok((lhs, sup))
}

/// Gap test for a frozen map `f` over `draws` Gaussian noise realizations
/// of `clean = A x`.
pub fn verify_theorem1(
    problem: &dyn SplitProblem,
    clean: &SpectralSinogram,
    f: &dyn Fn(&MaterialImage) -> MaterialImage,
    noise: &NoiseConfig,
    draws: usize,
) -> Result<GapReport> {
    if noise.kind != NoiseKind::Gaussian {
        return Err(Error::Refused(format!(
            "the identity needs Gaussian noise, got {}",
            noise.kind.as_str()
        )));
    }
    noise.validate()?;
    problem.scheme().check_shape(clean);
    let sigma = noise.sigma_g.unwrap_or(0.0);
    let p_total = clean.data.len() as f64;
    let mut lhs = Vec::with_capacity(draws);
    let mut sup = Vec::with_capacity(draws);
    for r in 0..draws {
        let cfg = NoiseConfig {
            seed: noise.seed.child(r),
            ..noise.clone()
        };
        let noisy = apply_noise(&cfg, clean)?;
        let (l, s) = split_losses(problem, f, clean, &noisy)?;
        lhs.push(l);
        sup.push(s);
    }
    Ok(GapReport::from_samples(&lhs, &sup, p_total * sigma * sigma))
}

/// Checkerboard pixel classes: `true` where `i + j` is even.
pub fn checkerboard(h: usize, w: usize) -> Vec<bool> {
    (0..h * w).map(|k| (k / w + k % w) % 2 == 0).collect()
}

/// Replaces the pixels of class `cls` by the mean of their in-image 4-neighbours.
pub fn mask_interpolate(z: &[f64], h: usize, w: usize, classes: &[bool], cls: bool) -> Vec<f64> {
    let mut out = z.to_vec();
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            if classes[k] != cls {
                continue;
            }
            let mut sum = 0.0;
            let mut n = 0.0;
            if i > 0 {
                sum += z[k - w];
                n += 1.0;
            }
            if i + 1 < h {
                sum += z[k + w];
                n += 1.0;
            }
            if j > 0 {
                sum += z[k - 1];
                n += 1.0;
            }
            if j + 1 < w {
                sum += z[k + 1];
                n += 1.0;
            }
            out[k] = sum / n;
        }
    }
    out
}

/// Denoiser that, on each checkerboard class, applies `f` to the image with
/// that class interpolated from its complement and keeps only that class.
pub fn masked_denoiser<'a>(
    h: usize,
    w: usize,
    f: &'a dyn Fn(&[f64]) -> Vec<f64>,
) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    let classes = checkerboard(h, w);
    move |z: &[f64]| {
        let mut out = vec![0.0; z.len()];
        for cls in [true, false] {
            let filled = f(&mask_interpolate(z, h, w, &classes, cls));
            for k in 0..z.len() {
                if classes[k] == cls {
                    out[k] = filled[k];
                }
            }
        }
        out
    }
}

/// Perturbs inputs inside each class and checks that outputs inside the
/// same class do not move. Returns the first violating pixel index.
pub fn probe_diagonal_free(
    g: &dyn Fn(&[f64]) -> Vec<f64>,
    z: &[f64],
    classes: &[bool],
    trials: usize,
    seed: &RngStream,
) -> Result<()> {
    let base = g(z);
    let mut rng = seed.rng();
    for t in 0..trials {
        let cls = t % 2 == 0;
        let mut zz = z.to_vec();
        for (k, v) in zz.iter_mut().enumerate() {
            if classes[k] == cls {
                *v += rng.random::<f64>() - 0.5;
            }
        }
        let out = g(&zz);
        if let Some(k) = (0..z.len()).find(|&k| classes[k] == cls && out[k] != base[k]) {
            return Err(Error::NotDiagonalFree { index: k });
        }
    }
    Ok(())
}

pub const PROBE_TRIALS: usize = 100;

/// Image-domain gap test for a denoiser `g` applied to `x + η`.
///
/// With `check` set, `g` must pass the diagonal-freeness probe first.
pub fn verify_prop_noise2self(
    g: &dyn Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    h: usize,
    w: usize,
    sigma: f64,
    draws: usize,
    seed: &RngStream,
    check: bool,
) -> Result<GapReport> {
    assert_eq!(x.len(), h * w, "image does not match shape");
    if check {
        probe_diagonal_free(g, x, &checkerboard(h, w), PROBE_TRIALS, &seed.child("probe"))?;
    }
    let clean = SpectralSinogram::from_vec(h, w, 1, x.to_vec())?;
    let mut lhs = Vec::with_capacity(draws);
    let mut sup = Vec::with_capacity(draws);
    for r in 0..draws {
        let cfg = NoiseConfig::gaussian(sigma, seed.child(r));
        let y = apply_noise(&cfg, &clean)?.data;
        let out = g(&y);
        lhs.push(sq_dist(&out, &y));
        sup.push(sq_dist(&out, x));
    }
    Ok(GapReport::from_samples(&lhs, &sup, (h * w) as f64 * sigma * sigma))
}
