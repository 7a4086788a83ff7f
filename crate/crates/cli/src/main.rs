//! `uiqa` command-line driver.
//!
//! Exit codes: 0 success, 1 other runtime failure, 2 I/O or data error,
//! 3 checkpoint mode mismatch, 4 configuration or flag error.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use uiqa_core::checkpoint::Checkpoint;
use uiqa_core::config::{Mode, TrainConfig};
use uiqa_core::data::{load_manifest, DatasetKind};
use uiqa_core::evaluator::{evaluate, inference_patch, report_text, write_reports};
use uiqa_core::image::ImageTensor;
use uiqa_core::nr_head::nr_score;
use uiqa_core::trainer::{run, tsv_logger, TrainOptions};
use uiqa_core::IqaError;

/// Overrides the checkpoint directory of `train`.
const CHECKPOINT_DIR_ENV: &str = "UIQA_CHECKPOINT_DIR";
const DEFAULT_CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Parser, Debug)]
#[command(
    name = "uiqa",
    version,
    about = "Full-reference and no-reference image quality scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Fr,
    Nr,
    Uni,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fr => Mode::Fr,
            ModeArg::Nr => Mode::Nr,
            ModeArg::Uni => Mode::Uni,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Fr,
    Nr,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score a distorted image against its reference (0 = identical).
    ScoreFr {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        dist: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a single image on the 1..5 scale and print its distribution.
    ScoreNr {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train a model; writes best.safetensors and train_log.tsv.
    Train {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// TOML config; defaults to the mode's preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fr_manifest: Option<PathBuf>,
        #[arg(long)]
        nr_manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint directory; the environment variable takes precedence.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest and write CSV and text reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest kind; detected from the CSV header when omitted.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        /// Report directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print checkpoint metadata.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn exit_code(e: &IqaError) -> u8 {
    match e {
        IqaError::Io { .. }
        | IqaError::ImageDecode { .. }
        | IqaError::MissingColumn(_)
        | IqaError::Row { .. }
        | IqaError::Corrupt { .. }
        | IqaError::Version { .. } => 2,
        IqaError::ModeMismatch { .. } => 3,
        IqaError::Config(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> uiqa_core::Result<()> {
    match cmd {
        Command::ScoreFr {
            reference,
            dist,
            checkpoint,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            ckpt.require_mode(&[Mode::Fr, Mode::Uni])?;
            let r = ImageTensor::load(&reference)?;
            let d = ImageTensor::load(&dist)?;
            let s = ckpt.model.fr_score(&r, &d)?;
            println!("{:.6}", s.0);
        }
        Command::ScoreNr { image, checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            ckpt.require_mode(&[Mode::Nr, Mode::Uni])?;
            let img = ImageTensor::load(&image)?;
            let patch = inference_patch(&img, ckpt.config.patch_size);
            let dist = ckpt.model.nr_distribution_tiled(&img, patch)?;
            let probs: Vec<String> = dist.probs().iter().map(|p| format!("{p:.6}")).collect();
            println!("score\t{:.6}", nr_score(&dist));
            println!("distribution\t{}", probs.join("\t"));
        }
        Command::Train {
            mode,
            config,
            fr_manifest,
            nr_manifest,
            seed,
            out,
        } => train(mode.into(), config, fr_manifest, nr_manifest, seed, out)?,
        Command::Eval {
            checkpoint,
            manifest,
            kind,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let kind = match kind {
                Some(KindArg::Fr) => DatasetKind::Fr,
                Some(KindArg::Nr) => DatasetKind::Nr,
                None => sniff_kind(&manifest)?,
            };
            let m = load_manifest(&manifest, kind)?;
            let report = evaluate(&ckpt, &m, kind)?;
            let stem = manifest
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "report".into());
            write_reports(&out, &stem, ckpt.mode, std::slice::from_ref(&report))?;
            print!("{}", report_text(ckpt.mode, std::slice::from_ref(&report)));
        }
        Command::InspectCheckpoint { checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            println!("mode\t{}", ckpt.mode);
            println!("epoch\t{}", ckpt.epoch);
            println!("step\t{}", ckpt.step);
            println!("backbone\t{}", ckpt.model.backbone().id());
            println!("parameters\t{}", ckpt.model.store.num_scalars());
            for (k, v) in &ckpt.metrics {
                println!("metric.{k}\t{v:.6}");
            }
            if let Some(a) = ckpt.nr_affine {
                println!("nr_affine\t{:.6}\t{:.6}", a.slope, a.intercept);
            }
            println!("--- config ---");
            print!("{}", ckpt.config.to_toml_string());
        }
    }
    Ok(())
}

/// FR manifests carry a `ref_path` column.
fn sniff_kind(path: &Path) -> uiqa_core::Result<DatasetKind> {
    let f = std::fs::File::open(path).map_err(|e| IqaError::io(path, e))?;
    let mut header = String::new();
    std::io::BufReader::new(f)
        .read_line(&mut header)
        .map_err(|e| IqaError::io(path, e))?;
    if header.split(',').any(|c| c.trim() == "ref_path") {
        Ok(DatasetKind::Fr)
    } else {
        Ok(DatasetKind::Nr)
    }
}

fn train(
    mode: Mode,
    config: Option<PathBuf>,
    fr_manifest: Option<PathBuf>,
    nr_manifest: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> uiqa_core::Result<()> {
    let mut cfg = match &config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::for_mode(mode),
    };
    if cfg.mode != mode {
        return Err(IqaError::Config(format!(
            "--mode {mode} conflicts with config mode {}",
            cfg.mode
        )));
    }
    if mode.has_fr() && fr_manifest.is_none() {
        return Err(IqaError::Config(format!(
            "--mode {mode} requires --fr-manifest"
        )));
    }
    if mode.has_nr() && nr_manifest.is_none() {
        return Err(IqaError::Config(format!(
            "--mode {mode} requires --nr-manifest"
        )));
    }
    if !mode.has_fr() && fr_manifest.is_some() {
        return Err(IqaError::Config(format!(
            "--mode {mode} takes no --fr-manifest"
        )));
    }
    if !mode.has_nr() && nr_manifest.is_some() {
        return Err(IqaError::Config(format!(
            "--mode {mode} takes no --nr-manifest"
        )));
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = std::env::var_os(CHECKPOINT_DIR_ENV)
        .map(PathBuf::from)
        .or(out)
        .or_else(|| cfg.checkpoint_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CHECKPOINT_DIR));
    cfg.checkpoint_dir = Some(dir.clone());
    cfg.validate()?;

    let fr = fr_manifest
        .map(|p| load_manifest(p, DatasetKind::Fr))
        .transpose()?;
    let nr = nr_manifest
        .map(|p| load_manifest(p, DatasetKind::Nr))
        .transpose()?;
    let mut log = tsv_logger(std::io::stdout());
    let opts = TrainOptions {
        on_step: Some(&mut log),
        ..TrainOptions::default()
    };
    let outcome = run(&cfg, fr.as_ref(), nr.as_ref(), opts)?;
    eprintln!(
        "trained {} steps; checkpoint {}",
        outcome.history.len(),
        dir.join("best.safetensors").display()
    );
    Ok(())
}
