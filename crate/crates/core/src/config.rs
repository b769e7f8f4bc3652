//! Flat `section.key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. [`Config::to_text`] writes every key with its resolved value.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::NetConfig;
use crate::noise::{NoiseConfig, NoiseKind};
use crate::phantom::PhantomConfig;
use crate::radon::Geometry;
use crate::rng::RngStream;
use crate::solver::{SolverConfig, StepSchedule};
use crate::spectral::{build_default_model, SpectralModel};
use crate::training::{Method, MethodConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub size: usize,
    pub n_angles: usize,
    pub contrast_scale: f64,
    pub deform_amplitude: f64,
    pub n_energies: usize,
    pub n_bins: usize,
    pub n_materials: usize,
    pub noise_kind: NoiseKind,
    pub i0: f64,
    pub sigma_e: f64,
    pub sigma_g: Option<f64>,
    pub mc_draws: usize,
    pub solver_iters: usize,
    pub step: StepSchedule,
    pub channels: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_interval: usize,
    pub lr: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub shuffle: bool,
    pub master_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            size: 64,
            n_angles: 16,
            contrast_scale: 0.05,
            deform_amplitude: 0.1,
            n_energies: 150,
            n_bins: 5,
            n_materials: 3,
            noise_kind: NoiseKind::PoissonElectronic,
            i0: 1e5,
            sigma_e: 1e-3,
            sigma_g: None,
            mc_draws: 2000,
            solver_iters: crate::solver::DEFAULT_ITERS,
            step: StepSchedule::Relative(crate::solver::DEFAULT_RELATIVE_STEP),
            channels: crate::model::DEFAULT_CHANNELS,
            max_epochs: crate::training::DEFAULT_MAX_EPOCHS,
            patience: crate::training::DEFAULT_PATIENCE,
            eval_interval: crate::training::DEFAULT_EVAL_INTERVAL,
            lr: crate::model::DEFAULT_LR,
            n_train: 60,
            n_val: 20,
            n_test: 20,
            shuffle: false,
            master_seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            c.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "geometry.size" => self.size = parse(key, v)?,
            "geometry.n_angles" => self.n_angles = parse(key, v)?,
            "geometry.contrast_scale" => self.contrast_scale = parse(key, v)?,
            "geometry.deform_amplitude" => self.deform_amplitude = parse(key, v)?,
            "spectral.E" => self.n_energies = parse(key, v)?,
            "spectral.B" => self.n_bins = parse(key, v)?,
            "spectral.M" => self.n_materials = parse(key, v)?,
            "noise.kind" => {
                self.noise_kind =
                    NoiseKind::parse(v).ok_or_else(|| Error::Config(format!("unknown noise kind `{v}`")))?
            }
            "noise.I0" => self.i0 = parse(key, v)?,
            "noise.sigma_e" => self.sigma_e = parse(key, v)?,
            "noise.sigma_g" => self.sigma_g = if v == "none" { None } else { Some(parse(key, v)?) },
            "noise.mc_draws" => self.mc_draws = parse(key, v)?,
            "solver.iters" => self.solver_iters = parse(key, v)?,
            "solver.step" => self.step = StepSchedule::parse(v)?,
            "net.channels" => self.channels = parse(key, v)?,
            "train.max_epochs" => self.max_epochs = parse(key, v)?,
            "train.patience" => self.patience = parse(key, v)?,
            "train.eval_interval" => self.eval_interval = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.n_train" => self.n_train = parse(key, v)?,
            "train.n_val" => self.n_val = parse(key, v)?,
            "train.n_test" => self.n_test = parse(key, v)?,
            "train.shuffle" => self.shuffle = parse(key, v)?,
            "seed.master" => self.master_seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.size < 2 || self.size % 2 != 0 {
            return fail(format!("geometry.size = {} must be even and at least 2", self.size));
        }
        if self.n_angles < 2 {
            return fail("geometry.n_angles must be at least 2".into());
        }
        if self.channels == 0 {
            return fail("net.channels must be at least 1".into());
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return fail("dataset split sizes must be at least 1".into());
        }
        if self.mc_draws < 2 {
            return fail("noise.mc_draws must be at least 2".into());
        }
        self.phantom(RngStream::new(0, "check")).validate()?;
        self.noise(RngStream::new(0, "check")).validate()?;
        self.solver().validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("geometry.size", self.size.to_string());
        put("geometry.n_angles", self.n_angles.to_string());
        put("geometry.contrast_scale", self.contrast_scale.to_string());
        put("geometry.deform_amplitude", self.deform_amplitude.to_string());
        put("spectral.E", self.n_energies.to_string());
        put("spectral.B", self.n_bins.to_string());
        put("spectral.M", self.n_materials.to_string());
        put("noise.kind", self.noise_kind.as_str().to_string());
        put("noise.I0", self.i0.to_string());
        put("noise.sigma_e", self.sigma_e.to_string());
        put("noise.sigma_g", self.sigma_g.map_or("none".into(), |v| v.to_string()));
        put("noise.mc_draws", self.mc_draws.to_string());
        put("solver.iters", self.solver_iters.to_string());
        put("solver.step", self.step.to_config_string());
        put("net.channels", self.channels.to_string());
        put("train.max_epochs", self.max_epochs.to_string());
        put("train.patience", self.patience.to_string());
        put("train.eval_interval", self.eval_interval.to_string());
        put("train.lr", self.lr.to_string());
        put("train.n_train", self.n_train.to_string());
        put("train.n_val", self.n_val.to_string());
        put("train.n_test", self.n_test.to_string());
        put("train.shuffle", self.shuffle.to_string());
        put("seed.master", self.master_seed.to_string());
        s
    }

    pub fn stream(&self, label: &str) -> RngStream {
        RngStream::new(self.master_seed, label)
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.size, self.n_angles)
    }

    pub fn spectral_model(&self) -> Result<SpectralModel> {
        build_default_model(self.n_energies, self.n_bins, self.n_materials)
    }

    pub fn phantom(&self, seed: RngStream) -> PhantomConfig {
        PhantomConfig {
            size: self.size,
            contrast_scale: self.contrast_scale,
            deform_amplitude: self.deform_amplitude,
            seed,
        }
    }

    pub fn noise(&self, seed: RngStream) -> NoiseConfig {
        NoiseConfig {
            kind: self.noise_kind,
            i0: self.i0,
            sigma_e: self.sigma_e,
            sigma_g: self.sigma_g,
            seed,
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            iters: self.solver_iters,
            step: self.step.clone(),
            record_residuals: false,
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            channels: self.channels,
            residual: true,
        }
    }

    pub fn method(&self, method: Method) -> MethodConfig {
        MethodConfig {
            method,
            net: self.net(),
            solver: self.solver(),
            max_epochs: self.max_epochs,
            patience: self.patience,
            eval_interval: self.eval_interval,
            lr: self.lr,
            shuffle: self.shuffle,
            seed: self.stream("train"),
        }
    }
}
