use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use split_core::config::Config;
use split_core::metrics::evaluate;
use split_core::model::Checkpoint;
use split_core::noise::apply_noise;
use split_core::phantom::Manifest;
use split_core::pipeline::{self, TrainedRun, EFFECTIVE_CONFIG_FILE};
use split_core::render::write_pgm_stack;
use split_core::solver::cp_fast_with;
use split_core::tensor::read_tensor;
use split_core::training::Method;
use split_core::{MaterialImage, SpectralSinogram};

#[derive(Parser)]
#[command(name = "split", version, about = "Self-supervised learned reconstruction for spectral CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phantom datasets.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Noiseless spectral sinogram of a phantom.
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        phantom: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adds measurement noise to a sinogram. The noise stream is keyed by the
    /// input file name up to its first dot.
    Noise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Model-based reconstruction.
    Reconstruct {
        #[command(subcommand)]
        solver: ReconstructSolver,
    },
    Train(TrainArgs),
    /// Applies a trained network directory to a sinogram.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sino: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-material PSNR and SSIM.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo checks of the self-supervised loss identities.
    Verify {
        #[arg(value_enum)]
        which: VerifyKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Partitioning for theorem1.
        #[arg(long, default_value = "double-split")]
        method: String,
        /// Trained network directory used as the frozen map for theorem1.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// noise2self negative control: test the unmasked identity.
        #[arg(long)]
        identity: bool,
    },
    /// 16-bit PGM images, one per channel.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Treat the input as a sinogram and write one image per energy bin.
        #[arg(long)]
        sinogram: bool,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty directory.
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Subcommand)]
enum ReconstructSolver {
    Cpfast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sino: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Residual per iteration as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

/// Trains a network and writes the best checkpoint, `last/`, the trace and
/// the effective configuration to the output directory.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    method: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyKind {
    Theorem1,
    Noise2self,
}

/// Output paths of one command, removed if the command fails.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    fn file(&mut self, p: &Path) -> PathBuf {
        self.files.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn dir(&mut self, p: &Path) -> Result<PathBuf> {
        if !p.exists() {
            self.dirs.push(p.to_path_buf());
            fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
        }
        Ok(p.to_path_buf())
    }

    fn remove(&self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in &self.dirs {
            let _ = fs::remove_dir_all(d);
        }
    }
}

fn load_config(path: &Path) -> Result<Config> {
    Config::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn noise_id(path: &Path) -> String {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn run(cmd: Command, out: &mut Outputs) -> Result<()> {
    match cmd {
        Command::Dataset {
            action: DatasetAction::Gen { config, out: dir, overwrite },
        } => {
            let cfg = load_config(&config)?;
            let existed = dir.exists();
            if !existed {
                out.dirs.push(dir.clone());
            }
            let m = pipeline::dataset(&cfg, &dir, overwrite)?;
            fs::write(dir.join(EFFECTIVE_CONFIG_FILE), cfg.to_text())?;
            info!("wrote {} phantoms to {}", m.entries.len(), dir.display());
        }
        Command::Forward { config, phantom, out: path } => {
            let cfg = load_config(&config)?;
            let x = MaterialImage::load(&phantom)?;
            if x.height != cfg.size || x.materials != cfg.n_materials {
                bail!("phantom {}x{}x{} does not match the configuration", x.materials, x.height, x.width);
            }
            let fm = pipeline::forward_model(&cfg)?;
            fm.forward(&x).save(out.file(&path))?;
        }
        Command::Noise { config, input, out: path } => {
            let cfg = load_config(&config)?;
            let y = SpectralSinogram::load(&input)?;
            let noisy = apply_noise(&cfg.noise(cfg.stream("noise").child(noise_id(&input))), &y)?;
            noisy.save(out.file(&path))?;
        }
        Command::Reconstruct {
            solver: ReconstructSolver::Cpfast { config, sino, out: path, trace },
        } => {
            let cfg = load_config(&config)?;
            let y = SpectralSinogram::load(&sino)?;
            let fm = pipeline::forward_model(&cfg)?;
            let mut scfg = cfg.solver();
            scfg.record_residuals = trace.is_some();
            let rec = cp_fast_with(&fm, &y, &scfg)?;
            rec.image.save(out.file(&path))?;
            if let Some(t) = trace {
                rec.write_trace(out.file(&t))?;
            }
        }
        Command::Train(a) => {
            let cfg = load_config(&a.config)?;
            let method = Method::parse(&a.method)?;
            let manifest = Manifest::read(&a.data)?;
            let dir = out.dir(&a.out)?;
            let res = pipeline::run_training(&cfg, method, &manifest, Some(&dir))?;
            info!(
                "best epoch {} of {} ({:?})",
                res.best_epoch,
                res.last.epoch,
                res.stop
            );
        }
        Command::Infer { ckpt, sino, out: path } => {
            let run = TrainedRun::load(&ckpt)?;
            let y = SpectralSinogram::load(&sino)?;
            run.infer(&y)?.save(out.file(&path))?;
        }
        Command::Eval { recon, truth, out: path } => {
            let r = MaterialImage::load(&recon)?;
            let t = MaterialImage::load(&truth)?;
            if !r.same_shape(&t) {
                bail!("reconstruction and truth differ in shape");
            }
            evaluate(&r, &t).write_csv(out.file(&path))?;
        }
        Command::Verify {
            which,
            config,
            out: path,
            method,
            ckpt,
            identity,
        } => {
            let cfg = load_config(&config)?;
            let report = match which {
                VerifyKind::Theorem1 => {
                    let method = Method::parse(&method)?;
                    let params = match &ckpt {
                        Some(dir) => Some(Checkpoint::load(dir)?.params),
                        None => None,
                    };
                    pipeline::theorem1(&cfg, method, params.as_ref())?
                }
                VerifyKind::Noise2self => pipeline::noise2self(&cfg, identity)?,
            };
            report.write(out.file(&path))?;
            println!("{}", report.summary());
        }
        Command::Render { input, out: path, sinogram } => {
            let (dims, data) = read_tensor(&input)?;
            let (c, h, w, data) = match (dims.as_slice(), sinogram) {
                ([a, d, b], true) => {
                    let mut t = vec![0.0; data.len()];
                    for i in 0..a * d {
                        for k in 0..*b {
                            t[k * a * d + i] = data[i * b + k];
                        }
                    }
                    (*b, *a, *d, t)
                }
                ([c, h, w], false) => (*c, *h, *w, data),
                ([h, w], false) => (1, *h, *w, data),
                _ => bail!("cannot render a tensor of shape {dims:?}"),
            };
            for p in split_core::render::channel_paths(&path, c) {
                out.file(&p);
            }
            write_pgm_stack(&path, &data, c, h, w)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut out = Outputs::default();
    match run(cli.command, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            out.remove();
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
