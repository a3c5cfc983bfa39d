use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paacn_core::gradsuite::run_grad_suite;
use paacn_core::preprocess::{denoise_qwt, read_pgm, write_pgm, Filter, Threshold, ThresholdMode};
use paacn_core::trainer::{run_eval, run_preprocess, run_synth, run_train, ExperimentConfig, OptimizerKind};
use paacn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "paacn", version, about = "Pyramid attention atrous network for mammogram classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON experiment config with optional `synth`, `preprocess` and `train` sections
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for generation, augmentation, initialization and shuffling
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benign/malignant phantom dataset
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, value_name = "SIGMA")]
        noise: Option<f64>,
    },
    /// Denoise, resize and augment every image of a manifest
    Preprocess {
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
    },
    /// Train a model on a manifest
    Train {
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_name = "N")]
        batch_size: Option<usize>,
        #[arg(long, value_parser = parse_optimizer)]
        optimizer: Option<OptimizerKind>,
        /// Suppress per-epoch progress lines
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a manifest
    Eval {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        #[arg(long, value_name = "N", default_value_t = 16)]
        batch_size: usize,
    },
    /// Run the finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Wavelet-denoise a single PGM image
    Denoise {
        #[arg(long, value_name = "PGM")]
        input: PathBuf,
        #[arg(long, value_parser = parse_filter)]
        filter: Option<Filter>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ThresholdMode>,
        /// `universal` or a nonnegative number
        #[arg(long, value_parser = parse_threshold)]
        threshold: Option<Threshold>,
    },
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_filter(s: &str) -> std::result::Result<Filter, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<ThresholdMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_threshold(s: &str) -> std::result::Result<Threshold, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn out_dir(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| Error::Config("this subcommand needs --out <DIR>".into()))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    }
    .with_seed(g.seed);
    let seed = cfg.train.seed;
    match cli.command {
        Command::Synth { n, size, noise } => {
            if let Some(n) = n {
                cfg.synth.n = n;
            }
            if let Some(s) = size {
                cfg.synth.size = s;
            }
            if let Some(s) = noise {
                cfg.synth.noise_sigma = s;
            }
            let path = run_synth(&cfg.synth, seed, out_dir(g)?)?;
            println!("wrote {}", path.display());
        }
        Command::Preprocess { manifest } => {
            let path = run_preprocess(&manifest, &cfg.preprocess, seed, out_dir(g)?)?;
            println!("wrote {}", path.display());
        }
        Command::Train { manifest, epochs, lr, batch_size, optimizer, quiet } => {
            let t = &mut cfg.train;
            if let Some(e) = epochs {
                t.epochs = e;
            }
            if let Some(l) = lr {
                t.lr = l;
            }
            if let Some(b) = batch_size {
                t.batch_size = b;
            }
            if let Some(o) = optimizer {
                t.optimizer = o;
            }
            let out = out_dir(g)?;
            let outcome = run_train(&cfg.train, &manifest, out, |r| {
                if !quiet {
                    println!(
                        "epoch {:>4}  train_loss {:.6}  train_acc {:.4}  test_loss {:.6}  test_acc {:.4}",
                        r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc
                    );
                }
            })?;
            println!("wrote {} epochs and checkpoint to {}", outcome.history.len(), out.display());
        }
        Command::Eval { checkpoint, manifest, batch_size } => {
            let out = out_dir(g)?;
            let eval = run_eval(&checkpoint, &manifest, out, batch_size)?;
            for (k, v) in eval.report.entries() {
                println!("{k:<12} {}", paacn_core::metrics::percent(v));
            }
            if let Some(roc) = &eval.roc {
                println!("{:<12} {:.4}", "auc", paacn_core::metrics::auc_trapezoid(roc));
            }
        }
        Command::Gradcheck { seeds } => {
            let cases = run_grad_suite(seeds)?;
            for c in &cases {
                println!(
                    "{} {:<26} coords {:>6}  max_rel {:.3e}  max_abs {:.3e}  tol {:.0e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.coords,
                    c.worst,
                    c.max_abs_diff,
                    c.tol
                );
            }
            if let Some(out) = &g.out {
                std::fs::create_dir_all(out)?;
                write_json(&out.join("gradcheck.json"), &serde_json::to_value(&cases)?)?;
            }
            return Ok(cases.iter().all(|c| c.passed));
        }
        Command::Denoise { input, filter, levels, mode, threshold } => {
            let mut spec = cfg.preprocess.denoise.unwrap_or_default();
            if let Some(f) = filter {
                spec.filter = f;
            }
            if let Some(l) = levels {
                spec.levels = l;
            }
            if let Some(m) = mode {
                spec.mode = m;
            }
            if let Some(t) = threshold {
                spec.threshold = t;
            }
            let out = out_dir(g)?;
            std::fs::create_dir_all(out)?;
            let img = read_pgm(&input)?;
            let (clean, t) = denoise_qwt(&img, &spec)?;
            let name = input.file_name().map(PathBuf::from).unwrap_or_else(|| "denoised.pgm".into());
            let target = out.join(&name);
            write_pgm(&clean, &target, 65535)?;
            write_json(
                &out.join("provenance.json"),
                &serde_json::json!({
                    "source_id": img.source_id,
                    "output": name.to_string_lossy(),
                    "transforms": ["denoise"],
                    "denoise": spec,
                    "threshold": t,
                    "seed": seed,
                }),
            )?;
            println!("wrote {} (threshold {t:.6})", target.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
