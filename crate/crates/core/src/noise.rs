//! Measurement noise: photon counting with electronic noise, or idealized
//! additive Gaussian noise.

use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::SpectralSinogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    PoissonElectronic,
    Gaussian,
    None,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::PoissonElectronic => "poisson_electronic",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "poisson_electronic" => Some(NoiseKind::PoissonElectronic),
            "gaussian" => Some(NoiseKind::Gaussian),
            "none" => Some(NoiseKind::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// Photons per ray per bin.
    pub i0: f64,
    /// Electronic noise standard deviation, normalized intensity units.
    pub sigma_e: f64,
    /// Standard deviation of the idealized Gaussian mode.
    pub sigma_g: Option<f64>,
    pub seed: RngStream,
}

impl NoiseConfig {
    pub fn new(kind: NoiseKind, seed: RngStream) -> Self {
        Self {
            kind,
            i0: 1e5,
            sigma_e: 1e-3,
            sigma_g: None,
            seed,
        }
    }

    pub fn gaussian(sigma: f64, seed: RngStream) -> Self {
        Self {
            sigma_g: Some(sigma),
            ..Self::new(NoiseKind::Gaussian, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.i0 >= 1.0) {
            return Err(Error::Config(format!("I0 = {} must be at least 1", self.i0)));
        }
        if !(self.sigma_e >= 0.0) {
            return Err(Error::Config(format!("sigma_e = {} must be >= 0", self.sigma_e)));
        }
        match (self.kind, self.sigma_g) {
            (NoiseKind::Gaussian, None) => {
                Err(Error::Config("gaussian noise requires sigma_g".into()))
            }
            (_, Some(s)) if !(s >= 0.0) => Err(Error::Config(format!("sigma_g = {s} must be >= 0"))),
            _ => Ok(()),
        }
    }
}

/// Adds noise to a clean sinogram. Draws are taken in storage order from the
/// config's stream, so the result is a pure function of `(cfg, y_clean)`.
pub fn apply_noise(cfg: &NoiseConfig, y_clean: &SpectralSinogram) -> Result<SpectralSinogram> {
    cfg.validate()?;
    let mut out = y_clean.clone();
    match cfg.kind {
        NoiseKind::None => {}
        NoiseKind::Gaussian => {
            let sigma = cfg.sigma_g.unwrap();
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).unwrap();
                let mut rng = cfg.seed.rng();
                for v in &mut out.data {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        NoiseKind::PoissonElectronic => {
            let mut rng = cfg.seed.rng();
            let electronic = Normal::new(0.0, cfg.sigma_e).unwrap();
            for v in &mut out.data {
                let lambda = cfg.i0 * *v;
                let counts = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .map_err(|e| Error::Config(format!("poisson rate {lambda}: {e}")))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                *v = counts / cfg.i0 + electronic.sample(&mut rng);
            }
        }
    }
    Ok(out)
}
