//! Command-line front end: argument definitions and subcommand dispatch.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use apvit::analysis::{
    count_flops, grad_check, render_overlay, GradCheckOptions, OverlaySpec, OverlayStage,
};
use apvit::data::{generate_synthetic, load_dataset, save_dataset, Dataset};
use apvit::model::{forward, init_params, load_checkpoint, save_checkpoint, PoolingMode};
use apvit::train::{evaluate, train_loop, write_history_jsonl};
use apvit::{ApvitConfig, ApvitError, HeadKind, Result};
use clap::{Parser, Subcommand};

pub use config::{parse_config, parse_config_str, CliConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "apvit", version, about = "Attentive-pooling vision transformer toolkit")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write a checkpoint plus a JSON-lines metrics history.
    Train {
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics history path [default: checkpoint path with .jsonl].
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Dataset directory from `gen-data`; synthetic data otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split and print metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the analytic FLOPs breakdown.
    Flops {
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient check; exits 1 on failure.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, default_value_t = 5)]
        coords: usize,
        /// Negate the analytic gradient of this parameter group.
        #[arg(long, value_name = "GROUP")]
        flip_sign: Option<String>,
    },
    /// Write survival overlays for one test image.
    Visualize {
        /// Checkpoint to load [default: freshly initialized parameters].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Test-set image index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// `app` or `blockN`; repeatable.
        #[arg(long = "stage", default_value = "app")]
        stages: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the six APP/ATP/head combinations and print a comparison table.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the synthetic dataset to `DIR/train` and `DIR/test`.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the parsed command, writing reports to `out` and errors to stderr.
pub fn run(cli: &Cli, out: &mut dyn Write) -> u8 {
    let cfg = match parse_config(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match dispatch(&cli.command, &cfg, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ApvitError::Config(_) => EXIT_CONFIG,
                _ => EXIT_CHECK_FAILED,
            }
        }
    }
}

fn datasets(cfg: &CliConfig, dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match dir {
        Some(d) => Ok((load_dataset(&d.join("train"))?, load_dataset(&d.join("test"))?)),
        None => generate_synthetic(&cfg.data),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| ApvitError::io(Path::new("<stdout>"), e))
}

pub fn dispatch(command: &Command, cfg: &CliConfig, out: &mut dyn Write) -> Result<u8> {
    match command {
        Command::Train { out: ckpt, metrics, data } => {
            let (train, test) = datasets(cfg, data.as_deref())?;
            let outcome = train_loop::<f64>(&cfg.model, &cfg.train, &train, &test)?;
            save_checkpoint(ckpt, &outcome.params)?;
            let metrics = metrics.clone().unwrap_or_else(|| ckpt.with_extension("jsonl"));
            write_history_jsonl(&metrics, &outcome.history)?;
            if let Some(last) = outcome.history.last() {
                emit(out, &serde_json::to_string(last).expect("serializable"))?;
            }
        }
        Command::Eval { checkpoint, data } => {
            let (_, test) = datasets(cfg, data.as_deref())?;
            let params = load_checkpoint::<f64>(checkpoint, &cfg.model)?;
            let m = evaluate(&params, &cfg.model, &test)?;
            emit(out, &serde_json::to_string(&m).expect("serializable"))?;
        }
        Command::Flops { json } => {
            let report = count_flops(&cfg.model)?;
            emit(out, &if *json { report.to_json() } else { report.to_string() })?;
        }
        Command::Gradcheck {
            seed,
            eps,
            threshold,
            coords,
            flip_sign,
        } => {
            let opts = GradCheckOptions {
                eps: *eps,
                threshold: *threshold,
                coords_per_group: *coords,
                flip_sign: flip_sign.clone(),
                ..Default::default()
            };
            let report = match grad_check(&cfg.model, *seed, &opts) {
                Ok(r) => r,
                Err(ApvitError::TieDetected(msg)) => {
                    eprintln!("error: tie detected: {msg}");
                    return Ok(EXIT_CHECK_FAILED);
                }
                Err(e) => return Err(e),
            };
            emit(out, &report.to_string())?;
            if !report.passed {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::Visualize {
            checkpoint,
            data,
            index,
            stages,
            out_dir,
        } => {
            let stages = stages
                .iter()
                .map(|s| s.parse::<OverlayStage>())
                .collect::<Result<Vec<_>>>()?;
            let (_, test) = datasets(cfg, data.as_deref())?;
            let sample = test.samples.get(*index).ok_or_else(|| {
                ApvitError::Config(format!("image index {index} outside 0..{}", test.len()))
            })?;
            let params = match checkpoint {
                Some(p) => load_checkpoint::<f64>(p, &cfg.model)?,
                None => init_params::<f64>(&cfg.model, cfg.train.seed)?,
            };
            let (_, diag) = forward(&sample.image, &params, &cfg.model)?;
            fs::create_dir_all(out_dir).map_err(|e| ApvitError::io(out_dir, e))?;
            for stage in stages {
                let path = out_dir.join(format!("overlay_{stage}.pgm"));
                render_overlay(&sample.image, &diag, &cfg.model, &OverlaySpec { stage, path: path.clone() })?;
                emit(out, &path.display().to_string())?;
            }
        }
        Command::Ablate { data } => {
            let (train, test) = datasets(cfg, data.as_deref())?;
            emit(out, &ablate(cfg, &train, &test)?)?;
        }
        Command::GenData { out: dir } => {
            let (train, test) = generate_synthetic(&cfg.data)?;
            save_dataset(&dir.join("train"), &train)?;
            save_dataset(&dir.join("test"), &test)?;
            emit(
                out,
                &format!("wrote {} train and {} test images to {}", train.len(), test.len(), dir.display()),
            )?;
        }
    }
    Ok(EXIT_OK)
}

/// `(APP, ATP, head)` rows of the ablation grid.
pub const ABLATION_ROWS: [(bool, bool, HeadKind); 6] = [
    (false, false, HeadKind::Gap),
    (false, false, HeadKind::Clt),
    (false, true, HeadKind::Clt),
    (true, false, HeadKind::Gap),
    (true, false, HeadKind::Clt),
    (true, true, HeadKind::Clt),
];

/// Model config for one ablation row. APP off means no patch pooling; ATP
/// off means a keep rate of one.
pub fn ablation_config(base: &ApvitConfig, app: bool, atp: bool, head: HeadKind) -> ApvitConfig {
    ApvitConfig {
        pooling: if app { PoolingMode::Hard } else { PoolingMode::None },
        r: if atp { base.r } else { 1.0 },
        head,
        ..base.clone()
    }
}

/// Trains every ablation row from the same seed and renders the table.
pub fn ablate(cfg: &CliConfig, train: &Dataset, test: &Dataset) -> Result<String> {
    let mut table = format!(
        "{:<4} {:<4} {:<5} {:>9} {:>9} {:>7}\n",
        "APP", "ATP", "head", "accuracy", "mean_acc", "flops"
    );
    for (app, atp, head) in ABLATION_ROWS {
        let model = ablation_config(&cfg.model, app, atp, head);
        let outcome = train_loop::<f64>(&model, &cfg.train, train, test)?;
        let m = evaluate(&outcome.params, &model, test)?;
        let flops = count_flops(&model)?;
        let mark = |on: bool| if on { "yes" } else { "-" };
        table += &format!(
            "{:<4} {:<4} {:<5} {:>9.4} {:>9.4} {:>6.1}%\n",
            mark(app),
            mark(atp),
            head.to_string(),
            m.overall_accuracy,
            m.mean_class_accuracy,
            100.0 * flops.ratio
        );
    }
    Ok(table.trim_end().to_string())
}
