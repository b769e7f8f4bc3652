//! Structured splits of the measurement index set `angles × detectors × bins`.
//!
//! Parity is positional and 1-based: the odd subset holds 0-based indices
//! `0, 2, 4, …`. Energy bins are never split.

use std::fmt;

use crate::error::{Error, Result};
use crate::spectral::ForwardModel;
use crate::types::{MaterialImage, SpectralSinogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parity {
    Odd,
    Even,
}

impl Parity {
    pub fn flip(self) -> Self {
        match self {
            Parity::Odd => Parity::Even,
            Parity::Even => Parity::Odd,
        }
    }

    fn first(self) -> usize {
        match self {
            Parity::Odd => 0,
            Parity::Even => 1,
        }
    }
}

/// Which axis a subset slices and which parity it keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubsetKind {
    Angular(Parity),
    Detector(Parity),
}

impl SubsetKind {
    pub fn complement(self) -> Self {
        match self {
            SubsetKind::Angular(p) => SubsetKind::Angular(p.flip()),
            SubsetKind::Detector(p) => SubsetKind::Detector(p.flip()),
        }
    }

    pub fn parity(self) -> Parity {
        match self {
            SubsetKind::Angular(p) | SubsetKind::Detector(p) => p,
        }
    }

    /// Kept 0-based positions along the sliced axis of length `n`.
    pub fn indices(self, n: usize) -> Vec<usize> {
        (self.parity().first()..n).step_by(2).collect()
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (axis, parity) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad subset descriptor `{s}`")))?;
        let parity = match parity {
            "odd" => Parity::Odd,
            "even" => Parity::Even,
            _ => return Err(Error::Config(format!("bad subset parity `{parity}`"))),
        };
        match axis {
            "angular" => Ok(SubsetKind::Angular(parity)),
            "detector" => Ok(SubsetKind::Detector(parity)),
            _ => Err(Error::Config(format!("bad subset axis `{axis}`"))),
        }
    }
}

impl fmt::Display for SubsetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (axis, p) = match self {
            SubsetKind::Angular(p) => ("angular", p),
            SubsetKind::Detector(p) => ("detector", p),
        };
        let p = match p {
            Parity::Odd => "odd",
            Parity::Even => "even",
        };
        write!(f, "{axis}:{p}")
    }
}

/// A set of two-subset partitions of one measurement index set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionScheme {
    pub n_angles: usize,
    pub n_dets: usize,
    pub n_bins: usize,
    pub partitions: Vec<[SubsetKind; 2]>,
}

impl PartitionScheme {
    /// Number of partitions `K`.
    pub fn k(&self) -> usize {
        self.partitions.len()
    }

    /// All subsets as `(partition, subset, kind)` in enumeration order.
    pub fn subsets(&self) -> Vec<(usize, usize, SubsetKind)> {
        let mut out = Vec::new();
        for (i, p) in self.partitions.iter().enumerate() {
            for (j, &kind) in p.iter().enumerate() {
                out.push((i, j, kind));
            }
        }
        out
    }

    pub fn check_shape(&self, y: &SpectralSinogram) {
        assert!(
            y.n_angles == self.n_angles && y.n_dets == self.n_dets && y.n_bins == self.n_bins,
            "sinogram {}x{}x{} does not match scheme {}x{}x{}",
            y.n_angles,
            y.n_dets,
            y.n_bins,
            self.n_angles,
            self.n_dets,
            self.n_bins
        );
    }

    /// Indicator of `kind` over the full index set, angle-major.
    pub fn mask(&self, kind: SubsetKind) -> Vec<bool> {
        let mut m = vec![false; self.n_angles * self.n_dets * self.n_bins];
        let (angles, dets) = self.kept(kind);
        for &a in &angles {
            for &d in &dets {
                let base = (a * self.n_dets + d) * self.n_bins;
                m[base..base + self.n_bins].iter_mut().for_each(|v| *v = true);
            }
        }
        m
    }

    pub fn size(&self, kind: SubsetKind) -> usize {
        let (a, d) = self.kept(kind);
        a.len() * d.len() * self.n_bins
    }

    /// Kept angle and detector indices.
    pub fn kept(&self, kind: SubsetKind) -> (Vec<usize>, Vec<usize>) {
        match kind {
            SubsetKind::Angular(_) => (kind.indices(self.n_angles), (0..self.n_dets).collect()),
            SubsetKind::Detector(_) => ((0..self.n_angles).collect(), kind.indices(self.n_dets)),
        }
    }
}

fn check_dims(n_angles: usize, n_dets: usize) {
    assert!(n_angles >= 2 && n_dets >= 2, "split needs at least two angles and detectors");
}

/// Partition 1 splits angles by parity, partition 2 splits detectors.
pub fn make_double_split(n_angles: usize, n_dets: usize, n_bins: usize) -> PartitionScheme {
    check_dims(n_angles, n_dets);
    PartitionScheme {
        n_angles,
        n_dets,
        n_bins,
        partitions: vec![
            [SubsetKind::Angular(Parity::Odd), SubsetKind::Angular(Parity::Even)],
            [SubsetKind::Detector(Parity::Odd), SubsetKind::Detector(Parity::Even)],
        ],
    }
}

pub fn make_single_split(n_angles: usize, n_dets: usize, n_bins: usize) -> PartitionScheme {
    let mut s = make_double_split(n_angles, n_dets, n_bins);
    s.partitions.truncate(1);
    s
}

/// `y|Ω` packed as a smaller sinogram (angle-major, then detector, then bin).
pub fn restrict(y: &SpectralSinogram, kind: SubsetKind) -> SpectralSinogram {
    let (angles, dets) = kept_for(y, kind);
    let b = y.n_bins;
    let mut data = Vec::with_capacity(angles.len() * dets.len() * b);
    for &a in &angles {
        for &d in &dets {
            let i = y.index(a, d, 0);
            data.extend_from_slice(&y.data[i..i + b]);
        }
    }
    SpectralSinogram {
        n_angles: angles.len(),
        n_dets: dets.len(),
        n_bins: b,
        data,
    }
}

/// `y|Ωᶜ`.
pub fn complement(y: &SpectralSinogram, kind: SubsetKind) -> SpectralSinogram {
    restrict(y, kind.complement())
}

/// Embeds packed subset data into a zero sinogram of the full shape.
pub fn scatter(part: &SpectralSinogram, kind: SubsetKind, n_angles: usize, n_dets: usize) -> SpectralSinogram {
    let mut out = SpectralSinogram::zeros(n_angles, n_dets, part.n_bins);
    let (angles, dets) = kept_for(&out, kind);
    assert!(
        angles.len() == part.n_angles && dets.len() == part.n_dets,
        "subset data does not match the target shape"
    );
    let b = part.n_bins;
    for (pa, &a) in angles.iter().enumerate() {
        for (pd, &d) in dets.iter().enumerate() {
            let src = part.index(pa, pd, 0);
            let dst = out.index(a, d, 0);
            out.data[dst..dst + b].copy_from_slice(&part.data[src..src + b]);
        }
    }
    out
}

fn kept_for(y: &SpectralSinogram, kind: SubsetKind) -> (Vec<usize>, Vec<usize>) {
    match kind {
        SubsetKind::Angular(_) => (kind.indices(y.n_angles), (0..y.n_dets).collect()),
        SubsetKind::Detector(_) => ((0..y.n_angles).collect(), kind.indices(y.n_dets)),
    }
}

/// Forward models for every subset of a scheme, with angular subsets
/// projected directly on their restricted geometry.
#[derive(Debug, Clone)]
pub struct SubsetOperators {
    pub full: ForwardModel,
    pub scheme: PartitionScheme,
    angular: Vec<(Parity, ForwardModel)>,
}

impl SubsetOperators {
    pub fn new(full: ForwardModel, scheme: PartitionScheme) -> Self {
        let g = full.geometry();
        assert_eq!(g.n_angles(), scheme.n_angles, "scheme does not match geometry");
        assert_eq!(g.n_dets, scheme.n_dets, "scheme does not match geometry");
        assert_eq!(full.model.n_bins, scheme.n_bins, "scheme does not match spectral model");
        let mut angular = Vec::new();
        let has_angular = scheme
            .subsets()
            .iter()
            .any(|(_, _, k)| matches!(k, SubsetKind::Angular(_)));
        if has_angular {
            for p in [Parity::Odd, Parity::Even] {
                let kind = SubsetKind::Angular(p);
                angular.push((p, full.restricted(&kind.indices(g.n_angles()))));
            }
        }
        Self { full, scheme, angular }
    }

    /// Forward model on the angle-restricted geometry of an angular subset.
    pub fn angular_model(&self, kind: SubsetKind) -> Option<&ForwardModel> {
        match kind {
            SubsetKind::Angular(p) => self.angular.iter().find(|(q, _)| *q == p).map(|(_, f)| f),
            SubsetKind::Detector(_) => None,
        }
    }

    /// Line integrals on the subset rays, `rays_Ω × M`.
    pub fn line_integrals(&self, x: &MaterialImage, kind: SubsetKind) -> Vec<f64> {
        match self.angular_model(kind) {
            Some(fm) => fm.line_integrals(x),
            None => {
                let m = x.materials;
                let z = self.full.line_integrals(x);
                let g = self.full.geometry();
                let dets = kind.indices(g.n_dets);
                let mut out = Vec::with_capacity(g.n_angles() * dets.len() * m);
                for a in 0..g.n_angles() {
                    for &d in &dets {
                        let r = a * g.n_dets + d;
                        out.extend_from_slice(&z[r * m..(r + 1) * m]);
                    }
                }
                out
            }
        }
    }

    /// Adjoint of [`SubsetOperators::line_integrals`].
    pub fn backproject(&self, g_rays: &[f64], kind: SubsetKind, materials: usize) -> MaterialImage {
        match self.angular_model(kind) {
            Some(fm) => fm.projector.backproject_stack(g_rays, materials),
            None => {
                let g = self.full.geometry();
                let dets = kind.indices(g.n_dets);
                let m = materials;
                assert_eq!(g_rays.len(), g.n_angles() * dets.len() * m);
                let mut full = vec![0.0; g.rays() * m];
                let mut src = 0;
                for a in 0..g.n_angles() {
                    for &d in &dets {
                        let r = a * g.n_dets + d;
                        full[r * m..(r + 1) * m].copy_from_slice(&g_rays[src..src + m]);
                        src += m;
                    }
                }
                self.full.projector.backproject_stack(&full, m)
            }
        }
    }

    /// `A_Ω x = (A x)|Ω`.
    pub fn restricted_forward(&self, x: &MaterialImage, kind: SubsetKind) -> SpectralSinogram {
        let z = self.line_integrals(x, kind);
        let (angles, dets) = self.scheme.kept(kind);
        SpectralSinogram {
            n_angles: angles.len(),
            n_dets: dets.len(),
            n_bins: self.full.model.n_bins,
            data: self.full.model.phi_rays(&z),
        }
    }
}

/// `A_Ω x` for one subset, projecting only the rays in `Ω`.
pub fn restricted_forward(fm: &ForwardModel, x: &MaterialImage, kind: SubsetKind) -> SpectralSinogram {
    let g = fm.geometry();
    match kind {
        SubsetKind::Angular(_) => fm.restricted(&kind.indices(g.n_angles())).forward(x),
        SubsetKind::Detector(_) => restrict(&fm.forward(x), kind),
    }
}
