//! Two-scale convolutional encoder-decoder with hand-written gradients, and Adam.
//!
//! Layer stack (3×3 convolutions, zero padding, stride 1):
//!
//! ```text
//! conv(1→C) relu → conv(C→C) relu ─────────────────────────┐ skip
//!   → avgpool2 → conv(C→2C) relu → conv(2C→2C) relu → up2 ─┴→ concat(3C)
//!   → conv(3C→C) relu → conv(C→1) (+ input)
//! ```
//!
//! Parameters are one flat vector: for each layer, weights laid out
//! `(out, in, 3, 3)` followed by `out` biases.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{read_tensor, write_tensor};

pub const DEFAULT_CHANNELS: usize = 16;
pub const DEFAULT_LR: f64 = 1e-4;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub channels: usize,
    pub residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            residual: true,
        }
    }
}

/// `(in, out)` channel counts of the six convolutions.
pub fn layer_shapes(cfg: &NetConfig) -> [(usize, usize); 6] {
    let c = cfg.channels;
    [(1, c), (c, c), (c, 2 * c), (2 * c, 2 * c), (3 * c, c), (c, 1)]
}

pub fn param_count(cfg: &NetConfig) -> usize {
    layer_shapes(cfg).iter().map(|&(i, o)| o * i * 9 + o).sum()
}

/// Offsets of each layer's weights and biases in the flat vector.
pub fn layer_offsets(cfg: &NetConfig) -> [(usize, usize); 6] {
    let mut out = [(0, 0); 6];
    let mut at = 0;
    for (k, &(i, o)) in layer_shapes(cfg).iter().enumerate() {
        out[k] = (at, at + o * i * 9);
        at += o * i * 9 + o;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: NetConfig,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(cfg: NetConfig) -> Self {
        Self {
            cfg,
            values: vec![0.0; param_count(&cfg)],
        }
    }

    fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let (i, o) = layer_shapes(&self.cfg)[k];
        let (w, b) = layer_offsets(&self.cfg)[k];
        (&self.values[w..w + o * i * 9], &self.values[b..b + o])
    }
}

/// He-scaled uniform weights (std `√(2/fan_in)`), zero biases. With the
/// residual connection the output layer starts at zero, so the initial
/// network is the identity.
pub fn init_params(cfg: NetConfig, seed: &RngStream) -> ModelParams {
    let layers = if cfg.residual { 5 } else { 6 };
    he_uniform(cfg, seed, layers)
}

/// He-scaled uniform weights on every layer, including the output layer.
pub fn random_params(cfg: NetConfig, seed: &RngStream) -> ModelParams {
    he_uniform(cfg, seed, 6)
}

fn he_uniform(cfg: NetConfig, seed: &RngStream, layers: usize) -> ModelParams {
    assert!(cfg.channels >= 1, "network needs at least one channel");
    let mut p = ModelParams::zeros(cfg);
    let mut rng = seed.rng();
    for (k, &(i, o)) in layer_shapes(&cfg).iter().enumerate().take(layers) {
        let bound = (6.0 / (i * 9) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let (w, _) = layer_offsets(&cfg)[k];
        for v in &mut p.values[w..w + o * i * 9] {
            *v = dist.sample(&mut rng);
        }
    }
    p
}

/// Zero-padded 3×3 convolution, channels-first.
pub fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weights: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    debug_assert_eq!(input.len(), cin * h * w);
    debug_assert_eq!(weights.len(), cout * cin * 9);
    let n = h * w;
    let mut out = vec![0.0; cout * n];
    for o in 0..cout {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weights[((o * cin + i) * 3 + ky) * 3 + kx];
                    let (y0, y1) = valid(ky, h);
                    let (x0, x1) = valid(kx, w);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output rows (or columns) whose tap `k` lands inside the image.
fn valid(k: usize, len: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len - 1 } else { len };
    (lo, hi)
}

/// Gradients of [`conv3x3`]: accumulates into `gw`, `gb` and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    grad_out: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let n = h * w;
    let mut gin = if need_input_grad { vec![0.0; cin * n] } else { Vec::new() };
    for o in 0..cout {
        let g = &grad_out[o * n..(o + 1) * n];
        gb[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let idx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let (y0, y1) = valid(ky, h);
                    let (x0, x1) = valid(kx, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let gr = &g[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[idx] += acc;
                    if need_input_grad {
                        let wv = weights[idx];
                        let gi = &mut gin[i * n..(i + 1) * n];
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let gr = &g[y * w + x0..y * w + x1];
                            let d = &mut gi[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (dv, gv) in d.iter_mut().zip(gr) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries where the activation was clipped.
fn relu_backward(grad: &mut [f64], activation: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn avgpool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let base = ch * h * w + 2 * y * w + 2 * x;
                let s = input[base] + input[base + 1] + input[base + w] + input[base + w + 1];
                out[(ch * h2 + y) * w2 + x] = 0.25 * s;
            }
        }
    }
    out
}

fn avgpool2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = 0.25 * grad[(ch * h2 + y / 2) * w2 + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling from `h/2 × w/2`.
fn upsample2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = input[(ch * h2 + y / 2) * w2 + x / 2];
            }
        }
    }
    out
}

fn upsample2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let base = ch * h * w + 2 * y * w + 2 * x;
                out[(ch * h2 + y) * w2 + x] = grad[base] + grad[base + 1] + grad[base + w] + grad[base + w + 1];
            }
        }
    }
    out
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub height: usize,
    pub width: usize,
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    pooled: Vec<f64>,
    a3: Vec<f64>,
    a4: Vec<f64>,
    cat: Vec<f64>,
    a5: Vec<f64>,
}

fn check_image(img: &[f64], h: usize, w: usize) {
    assert_eq!(img.len(), h * w, "image does not match {h}x{w}");
    assert!(h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0, "network input must have even sides, got {h}x{w}");
}

/// Network output for one single-channel `h × w` image, plus the tape.
pub fn net_forward(params: &ModelParams, img: &[f64], h: usize, w: usize) -> (Vec<f64>, Tape) {
    check_image(img, h, w);
    let cfg = params.cfg;
    let shapes = layer_shapes(&cfg);
    let c = cfg.channels;
    let conv = |k: usize, x: &[f64], hh: usize, ww: usize| {
        let (wt, b) = params.layer(k);
        conv3x3(x, shapes[k].0, hh, ww, wt, b, shapes[k].1)
    };
    let (h2, w2) = (h / 2, w / 2);
    let mut a1 = conv(0, img, h, w);
    relu_in_place(&mut a1);
    let mut a2 = conv(1, &a1, h, w);
    relu_in_place(&mut a2);
    let pooled = avgpool2(&a2, c, h, w);
    let mut a3 = conv(2, &pooled, h2, w2);
    relu_in_place(&mut a3);
    let mut a4 = conv(3, &a3, h2, w2);
    relu_in_place(&mut a4);
    let mut cat = upsample2(&a4, 2 * c, h, w);
    cat.extend_from_slice(&a2);
    let mut a5 = conv(4, &cat, h, w);
    relu_in_place(&mut a5);
    let mut out = conv(5, &a5, h, w);
    if cfg.residual {
        for (o, x) in out.iter_mut().zip(img) {
            *o += x;
        }
    }
    let tape = Tape {
        height: h,
        width: w,
        input: img.to_vec(),
        a1,
        a2,
        pooled,
        a3,
        a4,
        cat,
        a5,
    };
    (out, tape)
}

/// Network output without keeping a tape.
pub fn net_apply(params: &ModelParams, img: &[f64], h: usize, w: usize) -> Vec<f64> {
    net_forward(params, img, h, w).0
}

/// Reverse pass: accumulates parameter gradients into `grad_params` and
/// returns the gradient with respect to the input image.
pub fn net_backward(params: &ModelParams, tape: &Tape, grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
    let cfg = params.cfg;
    let (h, w) = (tape.height, tape.width);
    assert_eq!(grad_out.len(), h * w, "output gradient does not match the tape");
    assert_eq!(grad_params.len(), params.values.len(), "gradient buffer does not match parameters");
    assert_eq!(tape.a1.len(), cfg.channels * h * w, "tape was recorded with other parameters");
    let shapes = layer_shapes(&cfg);
    let offsets = layer_offsets(&cfg);
    let c = cfg.channels;
    let (h2, w2) = (h / 2, w / 2);

    // Split the flat gradient into per-layer weight and bias slices.
    let mut rest: &mut [f64] = grad_params;
    let mut layers: Vec<(&mut [f64], &mut [f64])> = Vec::with_capacity(6);
    let mut consumed = 0;
    for (k, &(i, o)) in shapes.iter().enumerate() {
        debug_assert_eq!(offsets[k].0, consumed);
        let (gw, tail) = rest.split_at_mut(o * i * 9);
        let (gb, tail) = tail.split_at_mut(o);
        layers.push((gw, gb));
        rest = tail;
        consumed += o * i * 9 + o;
    }
    let mut back = |k: usize, input: &[f64], hh: usize, ww: usize, g: &[f64], need: bool| {
        let (wt, _) = params.layer(k);
        let (gw, gb) = &mut layers[k];
        conv3x3_backward(input, shapes[k].0, hh, ww, wt, shapes[k].1, g, gw, gb, need)
    };

    let mut g5 = back(5, &tape.a5, h, w, grad_out, true);
    relu_backward(&mut g5, &tape.a5);
    let gcat = back(4, &tape.cat, h, w, &g5, true);
    let (g_up, g_skip) = gcat.split_at(2 * c * h * w);
    let mut g4 = upsample2_backward(g_up, 2 * c, h, w);
    relu_backward(&mut g4, &tape.a4);
    let mut g3 = back(3, &tape.a3, h2, w2, &g4, true);
    relu_backward(&mut g3, &tape.a3);
    let gp = back(2, &tape.pooled, h2, w2, &g3, true);
    let mut g2 = avgpool2_backward(&gp, c, h, w);
    for (a, b) in g2.iter_mut().zip(g_skip) {
        *a += b;
    }
    relu_backward(&mut g2, &tape.a2);
    let mut g1 = back(1, &tape.a1, h, w, &g2, true);
    relu_backward(&mut g1, &tape.a1);
    let mut gin = back(0, &tape.input, h, w, &g1, true);
    if cfg.residual {
        for (a, b) in gin.iter_mut().zip(grad_out) {
            *a += b;
        }
    }
    gin
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(state.m.len(), params.len(), "optimizer state does not match parameters");
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        params[k] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// Saved network plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
    /// Digest of the run configuration that produced the checkpoint.
    pub config_hash: String,
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.params.values.len();
        write_tensor(dir.join("params.splt"), &[n], &self.params.values)?;
        let mut mv = self.adam.m.clone();
        mv.extend_from_slice(&self.adam.v);
        write_tensor(dir.join("adam.splt"), &[2, n], &mv)?;
        let mut meta = String::new();
        writeln!(meta, "epoch = {}", self.epoch).unwrap();
        writeln!(meta, "channels = {}", self.params.cfg.channels).unwrap();
        writeln!(meta, "residual = {}", self.params.cfg.residual).unwrap();
        writeln!(meta, "adam_t = {}", self.adam.t).unwrap();
        writeln!(meta, "lr = {}", self.adam.lr).unwrap();
        writeln!(meta, "config_hash = {}", self.config_hash).unwrap();
        let p = dir.join("meta.txt");
        fs::write(&p, meta).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("meta.txt");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let get = |key: &str| -> Result<String> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| Error::format(&p, format!("missing `{key}`")))
        };
        let parse_err = |key: &str| Error::format(&p, format!("bad value for `{key}`"));
        let cfg = NetConfig {
            channels: get("channels")?.parse().map_err(|_| parse_err("channels"))?,
            residual: get("residual")?.parse().map_err(|_| parse_err("residual"))?,
        };
        let (dims, values) = read_tensor(dir.join("params.splt"))?;
        if dims != [param_count(&cfg)] {
            return Err(Error::format(
                dir.join("params.splt"),
                format!("expected {} parameters, found {dims:?}", param_count(&cfg)),
            ));
        }
        let n = values.len();
        let (adims, mv) = read_tensor(dir.join("adam.splt"))?;
        if adims != [2, n] {
            return Err(Error::format(dir.join("adam.splt"), "optimizer state shape mismatch"));
        }
        let mut adam = AdamState::new(n, get("lr")?.parse().map_err(|_| parse_err("lr"))?);
        adam.m = mv[..n].to_vec();
        adam.v = mv[n..].to_vec();
        adam.t = get("adam_t")?.parse().map_err(|_| parse_err("adam_t"))?;
        Ok(Self {
            params: ModelParams { cfg, values },
            adam,
            epoch: get("epoch")?.parse().map_err(|_| parse_err("epoch"))?,
            config_hash: get("config_hash")?,
        })
    }
}

/// Random vector for tests and probes.
pub fn random_image(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}
