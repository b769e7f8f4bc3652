//! Self-supervised training on split reconstruction pairs: the
//! reconstruction-space loss and the measurement-space losses for one or two
//! partitions, early stopping and split inference.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{psnr, DataRange};
use crate::model::{adam_step, init_params, net_backward, net_forward, AdamState, Checkpoint, ModelParams, NetConfig};
use crate::partition::{make_double_split, make_single_split, restrict, PartitionScheme, SubsetKind, SubsetOperators};
use crate::rng::RngStream;
use crate::solver::{partial_reconstruction_with, SolverConfig};
use crate::tensor::{decode_tensor, encode_tensor};
use crate::types::{MaterialImage, SpectralSinogram};

pub const DEFAULT_MAX_EPOCHS: usize = 15000;
pub const DEFAULT_PATIENCE: usize = 500;
pub const DEFAULT_EVAL_INTERVAL: usize = 25;
/// Training losses above this are treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    XSpace,
    SingleSplit,
    DoubleSplit,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::XSpace => "xspace",
            Method::SingleSplit => "single-split",
            Method::DoubleSplit => "double-split",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().replace('_', "-").as_str() {
            "xspace" => Ok(Method::XSpace),
            "single-split" => Ok(Method::SingleSplit),
            "double-split" => Ok(Method::DoubleSplit),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }

    /// The partition scheme the method trains on.
    pub fn scheme(self, n_angles: usize, n_dets: usize, n_bins: usize) -> PartitionScheme {
        match self {
            Method::XSpace | Method::SingleSplit => make_single_split(n_angles, n_dets, n_bins),
            Method::DoubleSplit => make_double_split(n_angles, n_dets, n_bins),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub net: NetConfig,
    pub solver: SolverConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_interval: usize,
    pub lr: f64,
    pub shuffle: bool,
    pub seed: RngStream,
}

impl MethodConfig {
    pub fn new(method: Method, seed: RngStream) -> Self {
        Self {
            method,
            net: NetConfig::default(),
            solver: SolverConfig::default(),
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            eval_interval: DEFAULT_EVAL_INTERVAL,
            lr: crate::model::DEFAULT_LR,
            shuffle: false,
            seed,
        }
    }

    pub fn validate(&self, scheme: &PartitionScheme) -> Result<()> {
        if self.eval_interval == 0 {
            return Err(Error::Config("eval interval must be at least one epoch".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        let expected = match self.method {
            Method::XSpace | Method::SingleSplit => 1,
            Method::DoubleSplit => 2,
        };
        let angular_first = matches!(scheme.partitions.first().map(|p| p[0]), Some(SubsetKind::Angular(_)));
        if scheme.k() != expected || !angular_first {
            return Err(Error::Config(format!(
                "method {} does not fit a scheme with {} partitions",
                self.method.as_str(),
                scheme.k()
            )));
        }
        self.solver.validate()
    }

    /// Text summary hashed into checkpoints and pair caches.
    pub fn describe(&self) -> String {
        format!(
            "method={} channels={} residual={} iters={} step={} max_epochs={} patience={} eval_interval={} lr={} shuffle={} seed={}:{}",
            self.method.as_str(),
            self.net.channels,
            self.net.residual,
            self.solver.iters,
            self.solver.step.to_config_string(),
            self.max_epochs,
            self.patience,
            self.eval_interval,
            self.lr,
            self.shuffle,
            self.seed.seed,
            self.seed.label
        )
    }
}

/// One training pair for subset `(partition, subset)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub partition: usize,
    pub subset: usize,
    pub kind: SubsetKind,
    /// Reconstruction from the complement data.
    pub input: MaterialImage,
    /// Reconstruction from the subset data.
    pub target_image: MaterialImage,
    /// Measurements on the subset.
    pub target: SpectralSinogram,
}

/// Partial reconstructions for every subset of the scheme, rounded to f32.
pub fn subset_reconstructions(ops: &SubsetOperators, y: &SpectralSinogram, solver: &SolverConfig) -> Result<Vec<MaterialImage>> {
    ops.scheme.check_shape(y);
    let mut out = Vec::new();
    for (_, _, kind) in ops.scheme.subsets() {
        let part = restrict(y, kind);
        let mut img = partial_reconstruction_with(&ops.full, ops.angular_model(kind), &part, &kind, solver)?;
        img.round_to_f32();
        out.push(img);
    }
    Ok(out)
}

fn assemble_pairs(ops: &SubsetOperators, y: &SpectralSinogram, recons: Vec<MaterialImage>) -> Vec<Pair> {
    let subsets = ops.scheme.subsets();
    subsets
        .iter()
        .enumerate()
        .map(|(idx, &(i, j, kind))| {
            // Each partition has two subsets, so the complement is the sibling.
            let sibling = idx - j + (1 - j);
            Pair {
                partition: i,
                subset: j,
                kind,
                input: recons[sibling].clone(),
                target_image: recons[idx].clone(),
                target: restrict(y, kind),
            }
        })
        .collect()
}

/// Builds the training pairs of one sample, reconstructing every subset once.
pub fn precompute_pairs(ops: &SubsetOperators, y: &SpectralSinogram, solver: &SolverConfig) -> Result<Vec<Pair>> {
    let recons = subset_reconstructions(ops, y, solver)?;
    Ok(assemble_pairs(ops, y, recons))
}

/// On-disk cache of subset reconstructions keyed by sample id and run setup.
#[derive(Debug, Clone)]
pub struct PairCache {
    pub dir: PathBuf,
}

impl PairCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn paths(&self, sample: &str) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("{sample}.pairs.splt")),
            self.dir.join(format!("{sample}.pairs.sha256")),
        )
    }

    /// Cached pairs when present and intact, otherwise recomputed and stored.
    pub fn pairs(
        &self,
        sample: &str,
        key: &str,
        ops: &SubsetOperators,
        y: &SpectralSinogram,
        solver: &SolverConfig,
    ) -> Result<Vec<Pair>> {
        let (data_path, hash_path) = self.paths(sample);
        let n_sub = ops.scheme.subsets().len();
        if data_path.exists() {
            match self.read(&data_path, &hash_path, key, n_sub) {
                Ok(recons) => return Ok(assemble_pairs(ops, y, recons)),
                Err(e) => warn!("pair cache for {sample} rejected ({e}); recomputing"),
            }
        }
        let recons = subset_reconstructions(ops, y, solver)?;
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let first = &recons[0];
        let mut flat = Vec::with_capacity(n_sub * first.data.len());
        for r in &recons {
            flat.extend_from_slice(&r.data);
        }
        let bytes = encode_tensor(&[n_sub, first.materials, first.height, first.width], &flat);
        let digest = cache_digest(key, &bytes);
        fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
        fs::write(&hash_path, digest).map_err(|e| Error::io(&hash_path, e))?;
        Ok(assemble_pairs(ops, y, recons))
    }

    fn read(&self, data_path: &Path, hash_path: &Path, key: &str, n_sub: usize) -> Result<Vec<MaterialImage>> {
        let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
        let stored = fs::read_to_string(hash_path).map_err(|e| Error::io(hash_path, e))?;
        if stored.trim() != cache_digest(key, &bytes) {
            return Err(Error::format(data_path, "hash mismatch"));
        }
        let (dims, values) = decode_tensor(&bytes, data_path)?;
        if dims.len() != 4 || dims[0] != n_sub {
            return Err(Error::format(data_path, "unexpected cache shape"));
        }
        let per = dims[1] * dims[2] * dims[3];
        (0..n_sub)
            .map(|k| MaterialImage::from_vec(dims[1], dims[2], dims[3], values[k * per..(k + 1) * per].to_vec()))
            .collect()
    }
}

fn cache_digest(key: &str, bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(key.as_bytes());
    h.update([0u8]);
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Network applied to every channel with shared weights; returns outputs and tapes.
fn apply_channels(params: &ModelParams, img: &MaterialImage) -> (MaterialImage, Vec<crate::model::Tape>) {
    let mut out = MaterialImage::zeros(img.materials, img.height, img.width);
    let mut tapes = Vec::with_capacity(img.materials);
    for m in 0..img.materials {
        let (o, t) = net_forward(params, img.channel(m), img.height, img.width);
        out.channel_mut(m).copy_from_slice(&o);
        tapes.push(t);
    }
    (out, tapes)
}

/// Network applied channel-wise, without tapes.
pub fn net_image(params: &ModelParams, img: &MaterialImage) -> MaterialImage {
    apply_channels(params, img).0
}

fn check_finite(loss: f64, pair: &Pair) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "loss for pair ({}, {}) is {loss}",
            pair.partition, pair.subset
        )))
    }
}

fn n_partitions(pairs: &[Pair]) -> f64 {
    pairs.iter().map(|p| p.partition).max().map_or(1, |k| k + 1) as f64
}

/// Measurement-space loss `(1/K) Σ ‖A_Ω net(input) − y_Ω‖²` and its parameter gradient.
pub fn loss_y(ops: &SubsetOperators, params: &ModelParams, pairs: &[Pair], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let model = &ops.full.model;
    let (nb, nm) = (model.n_bins, model.n_materials);
    let scale = 1.0 / n_partitions(pairs);
    let mut grad = vec![0.0; if want_grad { params.values.len() } else { 0 }];
    let mut total = 0.0;
    let mut jac = vec![0.0; nb * nm];
    let mut phi = vec![0.0; nb];
    let mut scratch = vec![0.0; model.n_energies()];
    for pair in pairs {
        let (out, tapes) = apply_channels(params, &pair.input);
        let z = ops.line_integrals(&out, pair.kind);
        let rays = z.len() / nm;
        assert_eq!(rays * nb, pair.target.data.len(), "pair target does not match subset");
        let mut gz = vec![0.0; if want_grad { z.len() } else { 0 }];
        let mut loss = 0.0;
        for r in 0..rays {
            let zr = &z[r * nm..(r + 1) * nm];
            model.phi_into(zr, &mut phi, &mut scratch);
            let yr = &pair.target.data[r * nb..(r + 1) * nb];
            let res: Vec<f64> = phi.iter().zip(yr).map(|(a, b)| a - b).collect();
            loss += res.iter().map(|v| v * v).sum::<f64>();
            if want_grad {
                model.phi_jacobian_into(zr, &mut jac, &mut scratch);
                for m in 0..nm {
                    gz[r * nm + m] = 2.0 * scale * (0..nb).map(|b| jac[b * nm + m] * res[b]).sum::<f64>();
                }
            }
        }
        check_finite(loss, pair)?;
        total += scale * loss;
        if want_grad {
            let gimg = ops.backproject(&gz, pair.kind, nm);
            for (m, tape) in tapes.iter().enumerate() {
                net_backward(params, tape, gimg.channel(m), &mut grad);
            }
        }
    }
    Ok((total, grad))
}

/// Reconstruction-space loss `(1/K) Σ ‖net(input) − target_image‖²` and its gradient.
pub fn loss_x(params: &ModelParams, pairs: &[Pair], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let scale = 1.0 / n_partitions(pairs);
    let mut grad = vec![0.0; if want_grad { params.values.len() } else { 0 }];
    let mut total = 0.0;
    for pair in pairs {
        let (out, tapes) = apply_channels(params, &pair.input);
        let mut loss = 0.0;
        for (m, tape) in tapes.iter().enumerate() {
            let res: Vec<f64> = out
                .channel(m)
                .iter()
                .zip(pair.target_image.channel(m))
                .map(|(a, b)| a - b)
                .collect();
            loss += res.iter().map(|v| v * v).sum::<f64>();
            if want_grad {
                let g: Vec<f64> = res.iter().map(|v| 2.0 * scale * v).collect();
                net_backward(params, tape, &g, &mut grad);
            }
        }
        check_finite(loss, pair)?;
        total += scale * loss;
    }
    Ok((total, grad))
}

/// Reference-free agreement between the network outputs on the two subset
/// reconstructions of each partition, averaged over partitions and materials.
pub fn early_stop_metric(params: &ModelParams, pairs: &[Pair]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in pairs.iter().filter(|p| p.subset == 0) {
        let b = pairs
            .iter()
            .find(|p| p.partition == a.partition && p.subset == 1)
            .expect("partition without second subset");
        let oa = net_image(params, &a.target_image);
        let ob = net_image(params, &b.target_image);
        for m in 0..oa.materials {
            sum += psnr(ob.channel(m), oa.channel(m), DataRange::MaxOfPair);
            count += 1;
        }
    }
    sum / count as f64
}

/// Average of the network outputs on all complement reconstructions.
pub fn infer_from_pairs(params: &ModelParams, pairs: &[Pair]) -> MaterialImage {
    let k = n_partitions(pairs);
    let first = &pairs[0].input;
    let mut acc = MaterialImage::zeros(first.materials, first.height, first.width);
    for part in 0..k as usize {
        let members: Vec<&Pair> = pairs.iter().filter(|p| p.partition == part).collect();
        let w = 1.0 / (k * members.len() as f64);
        for p in members {
            let out = net_image(params, &p.input);
            for (a, o) in acc.data.iter_mut().zip(&out.data) {
                *a += w * o;
            }
        }
    }
    acc
}

/// Split inference from raw measurements.
pub fn infer(params: &ModelParams, ops: &SubsetOperators, y: &SpectralSinogram, solver: &SolverConfig) -> Result<MaterialImage> {
    Ok(infer_from_pairs(params, &precompute_pairs(ops, y, solver)?))
}

/// Pairs of one sample together with optional ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub pairs: Vec<Pair>,
    pub truth: Option<MaterialImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub stop_metric: f64,
    /// Per-material validation PSNR against ground truth, when known.
    pub psnr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    Diverged(String),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: usize,
    pub trace: Vec<TrainRecord>,
    pub stop: StopReason,
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TrainRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace_csv(trace)).map_err(|e| Error::io(path, e))
}

pub fn trace_csv(trace: &[TrainRecord]) -> String {
    let mut s = String::from("epoch,loss,stop_metric,psnr_iodine,psnr_gadolinium,psnr_water\n");
    for r in trace {
        let p = |m: usize| r.psnr.get(m).map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(s, "{},{:.9e},{:.6},{},{},{}", r.epoch, r.loss, r.stop_metric, p(1), p(2), p(0)).unwrap();
    }
    s
}

fn sample_loss(method: Method, ops: &SubsetOperators, params: &ModelParams, pairs: &[Pair], grad: bool) -> Result<(f64, Vec<f64>)> {
    match method {
        Method::XSpace => loss_x(params, pairs, grad),
        Method::SingleSplit | Method::DoubleSplit => loss_y(ops, params, pairs, grad),
    }
}

fn validation(params: &ModelParams, val: &[Sample]) -> (f64, Vec<f64>) {
    let metric = val.iter().map(|s| early_stop_metric(params, &s.pairs)).sum::<f64>() / val.len() as f64;
    let with_truth: Vec<&Sample> = val.iter().filter(|s| s.truth.is_some()).collect();
    let mut psnrs = Vec::new();
    if !with_truth.is_empty() {
        let m = with_truth[0].truth.as_ref().unwrap().materials;
        psnrs = vec![0.0; m];
        for s in &with_truth {
            let rec = infer_from_pairs(params, &s.pairs);
            let t = s.truth.as_ref().unwrap();
            for (k, p) in psnrs.iter_mut().enumerate() {
                *p += psnr(rec.channel(k), t.channel(k), DataRange::MaxOfReference) / with_truth.len() as f64;
            }
        }
    }
    (metric, psnrs)
}

/// Adam training with batch size one and early stopping on the validation
/// agreement metric.
pub fn train(cfg: &MethodConfig, ops: &SubsetOperators, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate(&ops.scheme)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training needs at least one training and one validation sample".into()));
    }
    let hash = crate::model::config_hash(&cfg.describe());
    let mut params = init_params(cfg.net, &cfg.seed.child("init"));
    let mut adam = AdamState::new(params.values.len(), cfg.lr);
    let snapshot = |params: &ModelParams, adam: &AdamState, epoch: usize| Checkpoint {
        params: params.clone(),
        adam: adam.clone(),
        epoch,
        config_hash: hash.clone(),
    };

    let mut loss0 = 0.0;
    for s in train_set {
        loss0 += sample_loss(cfg.method, ops, &params, &s.pairs, false)?.0 / train_set.len() as f64;
    }
    let (metric0, psnr0) = validation(&params, val_set);
    let mut trace = vec![TrainRecord {
        epoch: 0,
        loss: loss0,
        stop_metric: metric0,
        psnr: psnr0,
    }];
    let mut best = snapshot(&params, &adam, 0);
    let mut best_metric = metric0;
    let mut best_epoch = 0;
    let mut stop = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut cfg.seed.child(format!("shuffle/{epoch}")).rng());
        }
        let mut epoch_loss = 0.0;
        let mut diverged = None;
        for &k in &order {
            let result = sample_loss(cfg.method, ops, &params, &train_set[k].pairs, true)
                .and_then(|(l, g)| {
                    if !(l <= DIVERGENCE_LOSS) {
                        return Err(Error::TrainingDiverged {
                            epoch,
                            message: format!("loss {l} on sample {}", train_set[k].id),
                        });
                    }
                    adam_step(&mut adam, &mut params.values, &g)?;
                    Ok(l)
                });
            match result {
                Ok(l) => epoch_loss += l / train_set.len() as f64,
                Err(e) => {
                    diverged = Some(e.to_string());
                    break;
                }
            }
        }
        if let Some(msg) = diverged {
            warn!("training stopped at epoch {epoch}: {msg}");
            stop = StopReason::Diverged(msg);
            break;
        }
        if epoch % cfg.eval_interval == 0 || epoch == cfg.max_epochs {
            let (metric, psnrs) = validation(&params, val_set);
            info!("epoch {epoch}: loss {epoch_loss:.6e} stop metric {metric:.4}");
            trace.push(TrainRecord {
                epoch,
                loss: epoch_loss,
                stop_metric: metric,
                psnr: psnrs,
            });
            if metric > best_metric {
                best_metric = metric;
                best_epoch = epoch;
                best = snapshot(&params, &adam, epoch);
            } else if epoch - best_epoch >= cfg.patience {
                stop = StopReason::EarlyStop;
                break;
            }
        }
    }
    let last_epoch = trace.last().map_or(0, |r| r.epoch);
    Ok(TrainOutcome {
        best,
        last: snapshot(&params, &adam, last_epoch),
        best_epoch,
        trace,
        stop,
    })
}

/// Pairs for a list of measurements, optionally through a cache.
pub fn build_samples(
    ops: &SubsetOperators,
    items: Vec<(String, SpectralSinogram, Option<MaterialImage>)>,
    solver: &SolverConfig,
    cache: Option<(&PairCache, &str)>,
) -> Result<Vec<Sample>> {
    items
        .into_iter()
        .map(|(id, y, truth)| {
            let pairs = match cache {
                Some((c, key)) => c.pairs(&id, key, ops, &y, solver)?,
                None => precompute_pairs(ops, &y, solver)?,
            };
            Ok(Sample { id, pairs, truth })
        })
        .collect()
}
