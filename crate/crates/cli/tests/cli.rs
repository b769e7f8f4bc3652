use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
geometry.size = 16
geometry.n_angles = 8
spectral.E = 40
solver.iters = 8
net.channels = 2
train.max_epochs = 3
train.eval_interval = 1
train.lr = 1e-3
train.n_train = 2
train.n_val = 1
train.n_test = 1
noise.mc_draws = 20
seed.master = 5
";

fn split(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_split"));
    for a in args {
        cmd.arg(a);
    }
    cmd.env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let out = split(args);
    assert!(
        out.status.success(),
        "split failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.txt"), config).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn dataset(w: &Work) -> PathBuf {
    let data = w.p("data");
    ok(&[&"dataset", &"gen", &"--config", &w.p("cfg.txt"), &"--out", &data]);
    data
}

fn first(data: &Path, prefix: &str) -> PathBuf {
    let mut names: Vec<PathBuf> = fs::read_dir(data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    names.sort();
    names.remove(0)
}

#[test]
fn eval_of_identical_images_is_perfect() {
    let w = Work::new(SMALL);
    let data = dataset(&w);
    let x = first(&data, "test_");
    let csv = w.p("eval.csv");
    ok(&[&"eval", &"--recon", &x, &"--truth", &x, &"--out", &csv]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "material,psnr_db,ssim,data_range_mode");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[1].parse::<f64>().unwrap(), 99.0);
        assert_eq!(f[2].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn cpfast_on_unattenuated_data_returns_zero() {
    let w = Work::new(SMALL);
    let zero = split_core::MaterialImage::zeros(3, 16, 16);
    let x = w.p("zero.splt");
    zero.save(&x).unwrap();
    let y = w.p("ones.splt");
    ok(&[&"forward", &"--config", &w.p("cfg.txt"), &"--phantom", &x, &"--out", &y]);
    let rec = w.p("rec.splt");
    let trace = w.p("trace.csv");
    ok(&[
        &"reconstruct", &"cpfast", &"--config", &w.p("cfg.txt"), &"--sino", &y, &"--out", &rec, &"--trace", &trace,
    ]);
    let r = split_core::MaterialImage::load(&rec).unwrap();
    assert!(r.data.iter().all(|v| v.abs() < 1e-9));
    let t = fs::read_to_string(&trace).unwrap();
    assert!(t.starts_with("iter,residual\n"));
    // Header, the starting residual and one row per iteration.
    assert_eq!(t.lines().count(), 1 + 1 + 8);
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let w = Work::new(SMALL);
    let cfg = w.p("cfg.txt");
    let data = dataset(&w);
    let truth = first(&data, "test_");
    let clean = w.p("clean.splt");
    ok(&[&"forward", &"--config", &cfg, &"--phantom", &truth, &"--out", &clean]);
    let noisy = w.p("test_0003.noisy.splt");
    ok(&[&"noise", &"--config", &cfg, &"--in", &clean, &"--out", &noisy]);
    let mut ckpts = Vec::new();
    for run in ["run_a", "run_b"] {
        let out = w.p(run);
        ok(&[&"train", &"--method", &"single-split", &"--config", &cfg, &"--data", &data, &"--out", &out]);
        for f in ["params.splt", "adam.splt", "meta.txt", "trace.csv", "effective_config.txt", "method.txt", "last/params.splt"] {
            assert!(out.join(f).exists(), "{run} is missing {f}");
        }
        ckpts.push(out);
    }
    for f in ["params.splt", "adam.splt", "meta.txt", "trace.csv", "last/params.splt"] {
        assert_eq!(fs::read(ckpts[0].join(f)).unwrap(), fs::read(ckpts[1].join(f)).unwrap(), "{f} differs");
    }
    let rec = w.p("rec.splt");
    ok(&[&"infer", &"--ckpt", &ckpts[0], &"--sino", &noisy, &"--out", &rec]);
    let csv = w.p("eval.csv");
    ok(&[&"eval", &"--recon", &rec, &"--truth", &truth, &"--out", &csv]);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 4);

    // Training from the echoed configuration reproduces the run.
    let echo = ckpts[0].join("effective_config.txt");
    let again = w.p("run_c");
    ok(&[&"train", &"--method", &"single-split", &"--config", &echo, &"--data", &data, &"--out", &again]);
    assert_eq!(fs::read(again.join("params.splt")).unwrap(), fs::read(ckpts[0].join("params.splt")).unwrap());

    let pgm = w.p("rec.pgm");
    ok(&[&"render", &"--in", &rec, &"--out", &pgm]);
    for k in 0..3 {
        let bytes = fs::read(w.p(&format!("rec_ch{k}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n# scale min="));
    }
}

#[test]
fn noise_is_deterministic() {
    let w = Work::new(SMALL);
    let data = dataset(&w);
    let x = first(&data, "train_");
    let clean = w.p("clean.splt");
    ok(&[&"forward", &"--config", &w.p("cfg.txt"), &"--phantom", &x, &"--out", &clean]);
    let (a, b) = (w.p("a.splt"), w.p("b.splt"));
    ok(&[&"noise", &"--config", &w.p("cfg.txt"), &"--in", &clean, &"--out", &a]);
    ok(&[&"noise", &"--config", &w.p("cfg.txt"), &"--in", &clean, &"--out", &b]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&clean).unwrap());
}

#[test]
fn noise2self_control_fails_and_masked_map_passes() {
    let cfg = format!("{SMALL}noise.kind = gaussian\nnoise.sigma_g = 0.05\nnoise.mc_draws = 400\n");
    let w = Work::new(&cfg);
    let good = w.p("good.csv");
    ok(&[&"verify", &"noise2self", &"--config", &w.p("cfg.txt"), &"--out", &good]);
    let bad = w.p("bad.csv");
    ok(&[&"verify", &"noise2self", &"--config", &w.p("cfg.txt"), &"--out", &bad, &"--identity"]);
    let last = |p: &Path| fs::read_to_string(p).unwrap().lines().nth(1).unwrap().split(',').last().unwrap().to_string();
    assert_eq!(last(&good), "true");
    assert_eq!(last(&bad), "false");
}

#[test]
fn theorem1_refuses_poisson_noise() {
    let w = Work::new(SMALL);
    let out = w.p("t1.csv");
    let res = split(&[&"verify", &"theorem1", &"--config", &w.p("cfg.txt"), &"--out", &out]);
    assert!(!res.status.success());
    assert!(!out.exists());
    assert!(String::from_utf8_lossy(&res.stderr).contains("Gaussian"));
}

#[test]
fn errors_exit_nonzero_and_leave_no_outputs() {
    let w = Work::new(SMALL);
    let res = split(&[&"eval", &"--bogus"]);
    assert!(!res.status.success());

    let missing = w.p("missing.splt");
    let out = w.p("out.splt");
    let res = split(&[&"eval", &"--recon", &missing, &"--truth", &missing, &"--out", &out]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("missing.splt"));
    assert!(!out.exists());

    fs::write(w.p("bad.txt"), "geometry.size = 16\nsolver.iters = many\n").unwrap();
    let res = split(&[&"dataset", &"gen", &"--config", &w.p("bad.txt"), &"--out", &w.p("d")]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));
    assert!(!w.p("d").exists());

    let ckpt = w.p("ckpt");
    let res = split(&[&"train", &"--method", &"xspace", &"--config", &w.p("cfg.txt"), &"--data", &w.p("nodata"), &"--out", &ckpt]);
    assert!(!res.status.success());
    assert!(!ckpt.exists());

    let res = split(&[&"train", &"--method", &"nonsense", &"--config", &w.p("cfg.txt"), &"--data", &w.p("nodata"), &"--out", &ckpt]);
    assert!(!res.status.success());
}
