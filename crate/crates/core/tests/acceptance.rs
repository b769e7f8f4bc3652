//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! all tolerances and run sizes are fixed below.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use split_core::config::Config;
use split_core::metrics::evaluate;
use split_core::model::{random_params, Checkpoint, ModelParams, NetConfig};
use split_core::noise::NoiseKind;
use split_core::partition::SubsetOperators;
use split_core::phantom::{generate_phantom, Manifest, Split};
use split_core::pipeline::{self, TrainedRun};
use split_core::radon::{Geometry, Projector};
use split_core::render::encode_pgm;
use split_core::rng::RngStream;
use split_core::solver::{cp_fast_with, SolverConfig, StepSchedule};
use split_core::spectral::{build_default_model, ForwardModel};
use split_core::tensor::encode_tensor;
use split_core::training::{infer_from_pairs, loss_y, precompute_pairs, Method};
use split_core::verify::{verify_prop_noise2self, verify_theorem1, SpectralProblem};
use split_core::MaterialImage;

// 1: adjoint
const ADJOINT_TOL: f64 = 1e-10;
const ADJOINT_PAIRS: usize = 20;
const ADJOINT_BUDGET: Duration = Duration::from_secs(10);
// 2: normalization
const ONES_TOL: f64 = 1e-12;
// 3: gradients
const JACOBIAN_TOL: f64 = 1e-6;
const LOSS_GRAD_TOL: f64 = 1e-3;
const LOSS_GRAD_COORDS: usize = 50;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
// 4: split identity
const THEOREM_SIGMA: f64 = 0.01;
const THEOREM_DRAWS: usize = 2000;
const THEOREM_SOLVER_ITERS: usize = 30;
const THEOREM_BUDGET: Duration = Duration::from_secs(15 * 60);
// 5: solver sanity
const CPFAST_ANGLES: usize = 128;
const CPFAST_ITERS: usize = 500;
const CPFAST_MIN_PSNR: f64 = 30.0;
const CPFAST_MONOTONE_FROM: usize = 5;
const CPFAST_BUDGET: Duration = Duration::from_secs(5 * 60);
// 6: method ordering
const ORDER_EPOCHS: usize = 1500;
const ORDER_MARGIN_DB: f64 = 1.0;
const ORDER_BUDGET: Duration = Duration::from_secs(45 * 60);
// 7: early stopping
const OVERFIT_EPOCHS: usize = 2000;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, pass: bool, detail: String, elapsed: Duration) -> Outcome {
    println!(
        "criterion {id} {name}: {} ({detail}; {:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    Outcome { id, pass, detail }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn adjoint() -> Outcome {
    let t = Instant::now();
    let geom = Geometry::new(64, 16);
    assert_eq!(geom.n_dets, 91);
    let proj = Projector::new(&geom);
    let mut rng = RngStream::new(1, "acceptance/adjoint").rng();
    let mut worst = 0.0f64;
    for _ in 0..ADJOINT_PAIRS {
        let x: Vec<f64> = (0..geom.pixels()).map(|_| rng.random::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..geom.rays()).map(|_| rng.random::<f64>() - 0.5).collect();
        let rx = proj.project(&x);
        let lhs: f64 = rx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(proj.backproject(&y)).map(|(a, b)| a * b).sum();
        let norm = rx.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((lhs - rhs).abs() / norm);
    }
    let el = t.elapsed();
    report(
        1,
        "adjoint exactness",
        worst < ADJOINT_TOL && el < ADJOINT_BUDGET,
        format!("worst relative mismatch {worst:.2e} over {ADJOINT_PAIRS} pairs"),
        el,
    )
}

fn normalization() -> Outcome {
    let t = Instant::now();
    let geom = Geometry::new(64, 16);
    let fm = ForwardModel::new(build_default_model(150, 5, 3).unwrap(), &geom);
    let y = fm.forward(&MaterialImage::zeros(3, 64, 64));
    let worst = y.data.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    report(2, "spectral normalization", worst <= ONES_TOL, format!("max |forward(0) - 1| = {worst:.2e}"), t.elapsed())
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let model = build_default_model(150, 5, 3).unwrap();
    let mut rng = RngStream::new(3, "acceptance/gradients").rng();
    let mut worst_jac = 0.0f64;
    for _ in 0..50 {
        let z: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 3.0).collect();
        let jac = model.phi_jacobian(&z);
        for k in 0..3 {
            let h = 1e-5;
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[k] += h;
            zm[k] -= h;
            let (fp, fm) = (model.phi(&zp), model.phi(&zm));
            for b in 0..5 {
                let fd = (fp[b] - fm[b]) / (2.0 * h);
                let j = jac[b * 3 + k];
                worst_jac = worst_jac.max((fd - j).abs() / j.abs().max(1e-12));
            }
        }
    }

    let n = 32;
    let geom = Geometry::new(n, 16);
    let fm = ForwardModel::new(model, &geom);
    let ops = SubsetOperators::new(fm.clone(), Method::DoubleSplit.scheme(16, geom.n_dets, 5));
    let x = generate_phantom(&split_core::phantom::PhantomConfig::new(n, RngStream::new(3, "acceptance/phantom"))).unwrap();
    let solver = SolverConfig {
        iters: 20,
        ..Default::default()
    };
    let pairs = precompute_pairs(&ops, &fm.forward(&x), &solver).unwrap();
    let mut p = random_params(
        NetConfig {
            channels: 4,
            residual: true,
        },
        &RngStream::new(3, "acceptance/params"),
    );
    // Keep the perturbation of the identity moderate so line integrals stay physical.
    for v in &mut p.values {
        *v *= 0.3;
    }
    let (_, grad) = loss_y(&ops, &p, &pairs, true).unwrap();
    let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst_loss = 0.0f64;
    let eps = 1e-6;
    for _ in 0..LOSS_GRAD_COORDS {
        let k = rng.random_range(0..p.values.len());
        let (mut a, mut b) = (p.clone(), p.clone());
        a.values[k] += eps;
        b.values[k] -= eps;
        let fd = (loss_y(&ops, &a, &pairs, false).unwrap().0 - loss_y(&ops, &b, &pairs, false).unwrap().0) / (2.0 * eps);
        let denom = fd.abs().max(grad[k].abs()).max(1e-3 * gmax);
        worst_loss = worst_loss.max((fd - grad[k]).abs() / denom);
    }
    let el = t.elapsed();
    report(
        3,
        "gradient checks",
        worst_jac < JACOBIAN_TOL && worst_loss < LOSS_GRAD_TOL && el < GRAD_BUDGET,
        format!("Jacobian rel {worst_jac:.2e}, loss-through-A rel {worst_loss:.2e} over {LOSS_GRAD_COORDS} coordinates"),
        el,
    )
}

fn small_config() -> Config {
    let mut c = Config::default();
    c.size = 32;
    c.n_angles = 16;
    c.solver_iters = 50;
    c.channels = 4;
    c.max_epochs = 100;
    c.eval_interval = 10;
    c.lr = 1e-3;
    c.n_train = 4;
    c.n_val = 1;
    c.n_test = 1;
    c.master_seed = 8;
    c
}

fn all_files(dir: &Path, out: &mut Vec<PathBuf>) {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            all_files(&p, out);
        } else {
            out.push(p);
        }
    }
}

/// Runs dataset generation, training and inference twice into separate
/// directories and compares every written byte. Returns the trained
/// network for reuse.
fn reproducibility() -> (Outcome, ModelParams) {
    let t = Instant::now();
    let cfg = small_config();
    let root = tempfile::tempdir().unwrap();
    let mut params = None;
    for run in ["a", "b"] {
        let dir = root.path().join(run);
        let manifest = pipeline::dataset(&cfg, dir.join("data"), false).unwrap();
        let out = dir.join("ckpt");
        pipeline::run_training(&cfg, Method::SingleSplit, &manifest, Some(&out)).unwrap();
        let trained = TrainedRun::load(&out).unwrap();
        let fm = pipeline::forward_model(&cfg).unwrap();
        for (id, x) in manifest.load_split(Split::Test).unwrap() {
            let id = id.trim_end_matches(".splt").to_string();
            let y = pipeline::simulate(&cfg, &fm, &id, &x).unwrap();
            trained.infer(&y).unwrap().save(dir.join(format!("{id}.recon.splt"))).unwrap();
        }
        params = Some(trained.params);
    }
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    all_files(&root.path().join("a"), &mut fa);
    all_files(&root.path().join("b"), &mut fb);
    let mut differing = Vec::new();
    let rel = |p: &Path, base: &str| p.strip_prefix(root.path().join(base)).unwrap().to_path_buf();
    let same_names = fa.iter().map(|p| rel(p, "a")).eq(fb.iter().map(|p| rel(p, "b")));
    for (a, b) in fa.iter().zip(&fb) {
        if fs::read(a).unwrap() != fs::read(b).unwrap() {
            differing.push(rel(a, "a").display().to_string());
        }
    }
    let pass = same_names && differing.is_empty() && !fa.is_empty();
    let detail = format!("{} files compared, {} differ {:?}", fa.len(), differing.len(), differing);
    (report(8, "reproducibility", pass, detail, t.elapsed()), params.unwrap())
}

fn theorem(f_params: &ModelParams) -> Outcome {
    let t = Instant::now();
    let mut cfg = small_config();
    cfg.noise_kind = NoiseKind::Gaussian;
    cfg.sigma_g = Some(THEOREM_SIGMA);
    cfg.solver_iters = THEOREM_SOLVER_ITERS;
    let ops = pipeline::operators(&cfg, Method::DoubleSplit).unwrap();
    let x = generate_phantom(&cfg.phantom(cfg.stream("acceptance/theorem"))).unwrap();
    let clean = ops.full.forward(&x);
    let problem = SpectralProblem {
        ops: &ops,
        solver: cfg.solver(),
    };
    let f = |img: &MaterialImage| split_core::training::net_image(f_params, img);
    let noise = cfg.noise(cfg.stream("acceptance/theorem/noise"));
    let rep = verify_theorem1(&problem, &clean, &f, &noise, THEOREM_DRAWS).unwrap();

    // Negative control: the identity is not diagonal-free.
    let img = x.channel(0);
    let id = |z: &[f64]| z.to_vec();
    let control = verify_prop_noise2self(&id, img, 32, 32, THEOREM_SIGMA, THEOREM_DRAWS, &cfg.stream("acceptance/control"), false).unwrap();
    let el = t.elapsed();
    report(
        4,
        "split identity Monte Carlo",
        rep.pass() && !control.pass() && el < THEOREM_BUDGET,
        format!(
            "gap {:.3e} vs 3 SE {:.3e}; control gap {:.3e} vs 3 SE {:.3e}",
            rep.gap,
            3.0 * rep.se,
            control.gap,
            3.0 * control.se
        ),
        el,
    )
}

fn cpfast() -> Outcome {
    let t = Instant::now();
    let geom = Geometry::new(64, CPFAST_ANGLES);
    let fm = ForwardModel::new(build_default_model(150, 5, 3).unwrap(), &geom);
    let x = generate_phantom(&split_core::phantom::PhantomConfig::new(64, RngStream::new(5, "acceptance/cpfast"))).unwrap();
    let y = fm.forward(&x);
    let cfg = SolverConfig {
        iters: CPFAST_ITERS,
        step: StepSchedule::Relative(split_core::solver::DEFAULT_RELATIVE_STEP),
        record_residuals: true,
    };
    let rec = cp_fast_with(&fm, &y, &cfg).unwrap();
    let ev = evaluate(&rec.image, &x);
    let psnrs: Vec<f64> = ev.rows.iter().map(|r| r.psnr_db).collect();
    let monotone = rec.residuals[CPFAST_MONOTONE_FROM..].windows(2).all(|w| w[1] <= w[0]);
    let el = t.elapsed();
    report(
        5,
        "CP-fast sanity",
        psnrs.iter().all(|&p| p >= CPFAST_MIN_PSNR) && monotone && el < CPFAST_BUDGET,
        format!("PSNR water/iodine/gadolinium {psnrs:.2?} dB, monotone after {CPFAST_MONOTONE_FROM}: {monotone}"),
        el,
    )
}

fn ordering_config() -> Config {
    let mut c = Config::default();
    c.size = 64;
    c.n_angles = 16;
    c.solver_iters = 200;
    c.channels = 4;
    c.lr = 1e-3;
    c.max_epochs = ORDER_EPOCHS;
    c.n_train = 5;
    c.n_val = 2;
    c.n_test = 2;
    c.master_seed = 6;
    c
}

/// Mean test PSNR over materials and test phantoms of the selected checkpoint,
/// plus that of the final checkpoint.
fn test_psnr(cfg: &Config, method: Method, manifest: &Manifest, best: &Checkpoint, last: &Checkpoint) -> (f64, f64) {
    let ops = pipeline::operators(cfg, method).unwrap();
    let samples = pipeline::split_samples(cfg, &ops, manifest, Split::Test, None).unwrap();
    let score = |p: &ModelParams| {
        let mut all = Vec::new();
        for s in &samples {
            let ev = evaluate(&infer_from_pairs(p, &s.pairs), s.truth.as_ref().unwrap());
            all.extend(ev.rows.iter().map(|r| r.psnr_db));
        }
        mean(&all)
    };
    (score(&best.params), score(&last.params))
}

fn ordering() -> Outcome {
    let t = Instant::now();
    let cfg = ordering_config();
    let dir = tempfile::tempdir().unwrap();
    let manifest = pipeline::dataset(&cfg, dir.path(), true).unwrap();
    let mut scores = Vec::new();
    for method in [Method::XSpace, Method::SingleSplit, Method::DoubleSplit] {
        let tm = Instant::now();
        let out = pipeline::run_training(&cfg, method, &manifest, None).unwrap();
        let (best, last) = test_psnr(&cfg, method, &manifest, &out.best, &out.last);
        println!(
            "  {}: test PSNR {best:.2} dB at epoch {} (final checkpoint {last:.2} dB), {:.0}s",
            method.as_str(),
            out.best_epoch,
            tm.elapsed().as_secs_f64()
        );
        scores.push(best);
    }
    let (x, s, d) = (scores[0], scores[1], scores[2]);
    let el = t.elapsed();
    report(
        6,
        "method ordering",
        s - x >= ORDER_MARGIN_DB && d - x >= ORDER_MARGIN_DB && el < ORDER_BUDGET,
        format!("single-split - xspace = {:+.2} dB, double-split - xspace = {:+.2} dB", s - x, d - x),
        el,
    )
}

fn early_stopping() -> Outcome {
    let t = Instant::now();
    let mut cfg = small_config();
    cfg.noise_kind = NoiseKind::PoissonElectronic;
    cfg.channels = 8;
    cfg.solver_iters = 100;
    cfg.n_train = 2;
    cfg.n_val = 2;
    cfg.n_test = 2;
    cfg.max_epochs = OVERFIT_EPOCHS;
    cfg.patience = OVERFIT_EPOCHS;
    cfg.eval_interval = 25;
    cfg.master_seed = 7;
    let dir = tempfile::tempdir().unwrap();
    let manifest = pipeline::dataset(&cfg, dir.path(), true).unwrap();
    let out = pipeline::run_training(&cfg, Method::SingleSplit, &manifest, None).unwrap();
    let final_epoch = out.trace.last().unwrap().epoch;
    let (best, last) = test_psnr(&cfg, Method::SingleSplit, &manifest, &out.best, &out.last);
    let el = t.elapsed();
    report(
        7,
        "early stopping",
        out.best_epoch < final_epoch && best >= last,
        format!(
            "metric peaks at epoch {} of {final_epoch}; selected {best:.2} dB vs final {last:.2} dB",
            out.best_epoch
        ),
        el,
    )
}

fn formats() -> Outcome {
    let t = Instant::now();
    let golden = |name: &str| fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap();
    let tensor = encode_tensor(&[2, 3], &[0.0, 1.0, -2.5, 0.1, 1000.0, 3.25]) == golden("tensor_2x3.splt");
    let pgm = encode_pgm(&[-1.0, 0.0, 0.5, 1.0, 2.0, 3.0], 2, 3) == golden("ramp_2x3.pgm");
    report(9, "format conformance", tensor && pgm, format!("tensor {tensor}, pgm {pgm}"), t.elapsed())
}

fn main() {
    let mut results = vec![adjoint(), normalization(), gradients(), cpfast(), formats()];
    let (repro, trained) = reproducibility();
    results.push(repro);
    results.push(theorem(&trained));
    results.push(early_stopping());
    results.push(ordering());
    results.sort_by_key(|r| r.id);
    println!("summary:");
    for r in &results {
        println!("  {} {} ({})", r.id, if r.pass { "PASS" } else { "FAIL" }, r.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
