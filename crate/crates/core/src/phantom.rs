//! Randomly deformed three-material Shepp–Logan phantoms and datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::MaterialImage;

pub const WATER: usize = 0;
pub const IODINE: usize = 1;
pub const GADOLINIUM: usize = 2;

/// Upper clip of the water channel.
pub const WATER_MAX: f64 = 1.1;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    /// Side length `H = W`.
    pub size: usize,
    /// Peak concentration of the contrast channels relative to water.
    pub contrast_scale: f64,
    /// Maximum relative perturbation of each ellipse parameter.
    pub deform_amplitude: f64,
    pub seed: RngStream,
}

impl PhantomConfig {
    pub fn new(size: usize, seed: RngStream) -> Self {
        Self {
            size,
            contrast_scale: 0.05,
            deform_amplitude: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config(format!("phantom size {} < 2", self.size)));
        }
        if !(self.contrast_scale > 0.0 && self.contrast_scale <= 0.2) {
            return Err(Error::Config(format!(
                "contrast_scale {} outside (0, 0.2]",
                self.contrast_scale
            )));
        }
        if !(0.0..=0.3).contains(&self.deform_amplitude) {
            return Err(Error::Config(format!(
                "deform_amplitude {} outside [0, 0.3]",
                self.deform_amplitude
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    /// Rotation in degrees.
    phi: f64,
    /// Additive water intensity.
    value: f64,
}

impl Ellipse {
    const fn new(cx: f64, cy: f64, a: f64, b: f64, phi: f64, value: f64) -> Self {
        Self { cx, cy, a, b, phi, value }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi.to_radians().sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Modified (Toft) Shepp–Logan layout in normalized coordinates `[-1, 1]²`.
const BASE_ELLIPSES: [Ellipse; 10] = [
    Ellipse::new(0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    Ellipse::new(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    Ellipse::new(0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    Ellipse::new(-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    Ellipse::new(0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    Ellipse::new(0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    Ellipse::new(0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    Ellipse::new(-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    Ellipse::new(0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
    Ellipse::new(0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
];

/// `(ellipse index, relative concentration)` for each contrast channel.
const IODINE_REGIONS: [(usize, f64); 2] = [(2, 1.0), (3, 0.6)];
const GADOLINIUM_REGIONS: [(usize, f64); 2] = [(4, 0.8), (5, 1.0)];

/// Rotation jitter in degrees per unit deform amplitude.
const ROTATION_JITTER_DEG: f64 = 30.0;

fn deformed_ellipses(cfg: &PhantomConfig) -> [Ellipse; 10] {
    let mut out = BASE_ELLIPSES;
    let d = cfg.deform_amplitude;
    if d == 0.0 {
        return out;
    }
    let mut rng = cfg.seed.rng();
    for (k, src) in BASE_ELLIPSES.iter().enumerate() {
        let j: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * d);
        if k == 1 {
            // The brain follows the skull's perturbation so the shell stays closed.
            let skull = out[0];
            let base = BASE_ELLIPSES[0];
            out[1] = Ellipse {
                cx: src.cx + (skull.cx - base.cx),
                cy: src.cy + (skull.cy - base.cy),
                a: src.a * skull.a / base.a,
                b: src.b * skull.b / base.b,
                phi: src.phi + (skull.phi - base.phi),
                value: src.value,
            };
            continue;
        }
        out[k] = Ellipse {
            cx: src.cx + j[0] * src.a,
            cy: src.cy + j[1] * src.b,
            a: src.a * (1.0 + j[2]),
            b: src.b * (1.0 + j[3]),
            phi: src.phi + j[4] * ROTATION_JITTER_DEG,
            value: src.value,
        };
    }
    out
}

/// Water / iodine / gadolinium density maps. Each pixel averages the
/// ellipse indicators over a 2×2 grid of subsamples.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<MaterialImage> {
    cfg.validate()?;
    let n = cfg.size;
    let ellipses = deformed_ellipses(cfg);
    let mut img = MaterialImage::zeros(3, n, n);
    let half = n as f64 / 2.0;
    let centre = (n as f64 - 1.0) / 2.0;
    let offsets = [-0.25, 0.25];
    for i in 0..n {
        for j in 0..n {
            let mut water = 0.0;
            let mut iodine = 0.0;
            let mut gadolinium = 0.0;
            for oy in offsets {
                for ox in offsets {
                    let x = (j as f64 - centre + ox) / half;
                    let y = (centre - i as f64 - oy) / half;
                    let intensity: f64 = ellipses
                        .iter()
                        .filter(|e| e.contains(x, y))
                        .map(|e| e.value)
                        .sum();
                    water += intensity.clamp(0.0, WATER_MAX);
                    for &(k, c) in &IODINE_REGIONS {
                        if ellipses[k].contains(x, y) {
                            iodine += c;
                        }
                    }
                    for &(k, c) in &GADOLINIUM_REGIONS {
                        if ellipses[k].contains(x, y) {
                            gadolinium += c;
                        }
                    }
                }
            }
            let p = i * n + j;
            img.channel_mut(WATER)[p] = water / 4.0;
            img.channel_mut(IODINE)[p] = (iodine / 4.0).min(1.0) * cfg.contrast_scale;
            img.channel_mut(GADOLINIUM)[p] = (gadolinium / 4.0).min(1.0) * cfg.contrast_scale;
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub file: String,
}

/// Dataset listing; `root` is the directory the file names are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn files(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.file)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<(String, MaterialImage)>> {
        self.files(split)
            .map(|e| Ok((e.file.clone(), MaterialImage::load(self.path(e))?)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            writeln!(s, "{} {}", e.split.as_str(), e.file).unwrap();
        }
        s
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (split, file) = line
                .split_once(' ')
                .ok_or_else(|| Error::format(&path, format!("line {}: expected `<split> <file>`", n + 1)))?;
            let split = Split::parse(split)
                .ok_or_else(|| Error::format(&path, format!("line {}: unknown split `{split}`", n + 1)))?;
            entries.push(ManifestEntry {
                split,
                file: file.trim().to_string(),
            });
        }
        Ok(Self { root, entries })
    }
}

/// Writes `n_train + n_val + n_test` phantoms plus `manifest.txt`.
///
/// Phantom `k` (global index) uses the stream `<cfg.seed.label>/<k>`.
pub fn generate_dataset(
    cfg: &PhantomConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: impl AsRef<Path>,
    overwrite: bool,
) -> Result<Manifest> {
    cfg.validate()?;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config("dataset split counts must be at least 1".into()));
    }
    let out_dir = out_dir.as_ref();
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(Error::Refused(format!(
                "output directory {} is not empty (pass overwrite to replace)",
                out_dir.display()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let splits = [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)];
    let mut entries = Vec::new();
    let mut index = 0usize;
    for (split, count) in splits {
        for _ in 0..count {
            let file = format!("{}_{index:04}.splt", split.as_str());
            let pcfg = PhantomConfig {
                seed: cfg.seed.child(index),
                ..cfg.clone()
            };
            generate_phantom(&pcfg)?.save(out_dir.join(&file))?;
            entries.push(ManifestEntry { split, file });
            index += 1;
        }
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> PhantomConfig {
        PhantomConfig::new(32, RngStream::new(seed, "phantom"))
    }

    #[test]
    fn zero_deformation_ignores_seed() {
        let mut a = cfg(1);
        a.deform_amplitude = 0.0;
        let mut b = cfg(2);
        b.deform_amplitude = 0.0;
        assert_eq!(generate_phantom(&a).unwrap(), generate_phantom(&b).unwrap());
    }

    #[test]
    fn channel_ranges() {
        for seed in 0..10 {
            let mut c = cfg(seed);
            c.deform_amplitude = 0.3;
            let img = generate_phantom(&c).unwrap();
            assert!(img.data.iter().all(|&v| v >= 0.0));
            assert!(img.channel(WATER).iter().all(|&v| v <= WATER_MAX));
            for m in [IODINE, GADOLINIUM] {
                let max = img.channel(m).iter().cloned().fold(0.0, f64::max);
                assert!(max <= c.contrast_scale + 1e-15);
                assert!(max > 0.0, "contrast channel {m} empty for seed {seed}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_phantom(&cfg(5)).unwrap(), generate_phantom(&cfg(5)).unwrap());
        assert_ne!(generate_phantom(&cfg(5)).unwrap(), generate_phantom(&cfg(6)).unwrap());
    }

    #[test]
    fn water_mass_is_comparable_across_seeds() {
        let masses: Vec<f64> = (0..20)
            .map(|s| generate_phantom(&cfg(s)).unwrap().channel(WATER).iter().sum())
            .collect();
        let mean = masses.iter().sum::<f64>() / masses.len() as f64;
        let max = masses.iter().cloned().fold(f64::MIN, f64::max);
        let min = masses.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - min) / mean < 0.5, "{min} .. {max}");
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(0);
        c.contrast_scale = 0.0;
        assert!(generate_phantom(&c).is_err());
        c.contrast_scale = 0.25;
        assert!(generate_phantom(&c).is_err());
        c.contrast_scale = 0.05;
        c.deform_amplitude = 0.31;
        assert!(generate_phantom(&c).is_err());
    }
}
