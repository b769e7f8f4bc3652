//! End-to-end glue: simulated measurements for a dataset, training runs and
//! inference from saved runs.

use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{random_params, Checkpoint, ModelParams};
use crate::noise::apply_noise;
use crate::partition::SubsetOperators;
use crate::phantom::{generate_dataset, generate_phantom, Manifest, Split};
use crate::spectral::ForwardModel;
use crate::training::{
    build_samples, infer_from_pairs, net_image, precompute_pairs, train, write_trace_csv, Method, PairCache, Sample,
    TrainOutcome,
};
use crate::verify::{masked_denoiser, verify_prop_noise2self, verify_theorem1, GapReport, SpectralProblem};
use crate::types::{MaterialImage, SpectralSinogram};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.txt";
pub const METHOD_FILE: &str = "method.txt";
pub const TRACE_FILE: &str = "trace.csv";
pub const LAST_DIR: &str = "last";
pub const CACHE_DIR: &str = "pairs";

pub fn forward_model(cfg: &Config) -> Result<ForwardModel> {
    Ok(ForwardModel::new(cfg.spectral_model()?, &cfg.geometry()))
}

pub fn operators(cfg: &Config, method: Method) -> Result<SubsetOperators> {
    let fm = forward_model(cfg)?;
    let g = fm.geometry();
    let scheme = method.scheme(g.n_angles(), g.n_dets, fm.model.n_bins);
    Ok(SubsetOperators::new(fm, scheme))
}

/// Noisy measurement of phantom `id`; the noise stream is keyed by the id.
pub fn simulate(cfg: &Config, fm: &ForwardModel, id: &str, x: &MaterialImage) -> Result<SpectralSinogram> {
    apply_noise(&cfg.noise(cfg.stream("noise").child(id)), &fm.forward(x))
}

/// Pairs for every phantom of one split.
pub fn split_samples(
    cfg: &Config,
    ops: &SubsetOperators,
    manifest: &Manifest,
    split: Split,
    cache: Option<&PairCache>,
) -> Result<Vec<Sample>> {
    let key = format!("{}|{}", cfg.to_text(), ops.scheme.k());
    let mut items = Vec::new();
    for (file, x) in manifest.load_split(split)? {
        let id = file.trim_end_matches(".splt").to_string();
        let y = simulate(cfg, &ops.full, &id, &x)?;
        items.push((id, y, Some(x)));
    }
    build_samples(ops, items, &cfg.solver(), cache.map(|c| (c, key.as_str())))
}

/// Trains `method` on a dataset and, with `out`, writes the run directory:
/// best checkpoint at the top level, final checkpoint in `last/`, the trace
/// and the effective configuration.
pub fn run_training(cfg: &Config, method: Method, manifest: &Manifest, out: Option<&Path>) -> Result<TrainOutcome> {
    let ops = operators(cfg, method)?;
    let cache = out.map(|o| PairCache::new(o.join(CACHE_DIR)));
    let train_set = split_samples(cfg, &ops, manifest, Split::Train, cache.as_ref())?;
    let val_set = split_samples(cfg, &ops, manifest, Split::Val, cache.as_ref())?;
    let outcome = train(&cfg.method(method), &ops, &train_set, &val_set)?;
    if let Some(dir) = out {
        outcome.best.save(dir)?;
        outcome.last.save(dir.join(LAST_DIR))?;
        write_trace_csv(dir.join(TRACE_FILE), &outcome.trace)?;
        write_text(&dir.join(EFFECTIVE_CONFIG_FILE), &cfg.to_text())?;
        write_text(&dir.join(METHOD_FILE), &format!("{}\n", method.as_str()))?;
    }
    Ok(outcome)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A trained network together with the setup it was trained under.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub cfg: Config,
    pub method: Method,
    pub params: ModelParams,
}

impl TrainedRun {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = Config::load(dir.join(EFFECTIVE_CONFIG_FILE))?;
        let mp = dir.join(METHOD_FILE);
        let method = Method::parse(&fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?)?;
        let ck = Checkpoint::load(dir)?;
        if ck.params.cfg != cfg.net() {
            return Err(Error::Config("checkpoint network does not match its configuration".into()));
        }
        Ok(Self {
            cfg,
            method,
            params: ck.params,
        })
    }

    pub fn infer(&self, y: &SpectralSinogram) -> Result<MaterialImage> {
        let ops = operators(&self.cfg, self.method)?;
        let g = ops.full.geometry();
        if y.n_angles != g.n_angles() || y.n_dets != g.n_dets || y.n_bins != ops.full.model.n_bins {
            return Err(Error::Config(format!(
                "sinogram {}x{}x{} does not match the trained geometry",
                y.n_angles, y.n_dets, y.n_bins
            )));
        }
        Ok(infer_from_pairs(&self.params, &precompute_pairs(&ops, y, &self.cfg.solver())?))
    }
}

pub fn dataset(cfg: &Config, out: impl AsRef<Path>, overwrite: bool) -> Result<Manifest> {
    generate_dataset(
        &cfg.phantom(cfg.stream("phantom")),
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        out,
        overwrite,
    )
}

/// Gap test of the split identity on one phantom with a frozen network.
/// Without `params` the frozen map is a residual network with every layer
/// randomly initialized.
pub fn theorem1(cfg: &Config, method: Method, params: Option<&ModelParams>) -> Result<GapReport> {
    let ops = operators(cfg, method)?;
    let x = generate_phantom(&cfg.phantom(cfg.stream("verify/phantom")))?;
    let clean = ops.full.forward(&x);
    let init;
    let params = match params {
        Some(p) => p,
        None => {
            init = random_params(cfg.net(), &cfg.stream("verify/init"));
            &init
        }
    };
    let problem = SpectralProblem {
        ops: &ops,
        solver: cfg.solver(),
    };
    let f = |img: &MaterialImage| net_image(params, img);
    verify_theorem1(&problem, &clean, &f, &cfg.noise(cfg.stream("verify/noise")), cfg.mc_draws)
}

/// Noise2Self gap test on the first material channel of a phantom, using
/// the checkerboard-masked local average. With `identity` the unmasked
/// identity map is tested instead, which must fail.
pub fn noise2self(cfg: &Config, identity: bool) -> Result<GapReport> {
    let sigma = match cfg.sigma_g {
        Some(s) => s,
        None => return Err(Error::Config("noise2self needs noise.sigma_g".into())),
    };
    let x = generate_phantom(&cfg.phantom(cfg.stream("verify/phantom")))?;
    let (h, w) = (x.height, x.width);
    let img = x.channel(0);
    let seed = cfg.stream("verify/noise");
    let id = |z: &[f64]| z.to_vec();
    if identity {
        verify_prop_noise2self(&id, img, h, w, sigma, cfg.mc_draws, &seed, false)
    } else {
        let g = masked_denoiser(h, w, &id);
        verify_prop_noise2self(&g, img, h, w, sigma, cfg.mc_draws, &seed, true)
    }
}
