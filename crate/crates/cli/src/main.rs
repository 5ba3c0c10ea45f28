//! `avwatch`: synthesize data, train, distill, evaluate and export scores.
//!
//! Exit codes: 0 success, 1 invalid configuration or failed check, 2 bad input data.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avwatch_core::avmodel::{load_checkpoint, load_class_base, save_checkpoint, ModelParams};
use avwatch_core::error::Error;
use avwatch_core::featureio::{
    load_split, read_features, synth_generate, write_dataset, write_features, Streams, VideoSample,
};
use avwatch_core::gradsuite::{run_gradient_suite, GRAD_EPS, GRAD_TOLERANCE};
use avwatch_core::metrics::EvalReport;
use avwatch_core::trainer::{
    detect_video, distill_ukd, evaluate, evaluate_dumps, score_dump, streams_for, train_model, Dataset, EpochLog,
    Mode, Trained,
};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::config::{keys_help, resolve, RunConfig};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_data_error() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "avwatch", version, about = "Weakly supervised audio-visual anomaly detection")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=3`. Repeatable; wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Single-threaded numerics and no wall times in reports, for byte-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset: features, ground-truth masks and manifests.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the model named by `train.mode` (teacher_av, student_visual or student_audio).
    Train {
        #[arg(long, value_name = "DIR", default_value = "run")]
        out: PathBuf,
    },
    /// Distill a visual student from an audio-visual teacher.
    Distill {
        /// Teacher checkpoint; overrides `train.teacher_checkpoint`.
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint, or precomputed score dumps, on a manifest.
    Eval {
        #[arg(long, value_name = "FILE", required_unless_present = "scores")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Directory of `<video_id>.scores.avfe` dumps to score instead of running a model.
        #[arg(long, value_name = "DIR")]
        scores: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Write per-video score dumps (`<video_id>.scores.avfe`).
    Score {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation and objective.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Only cases whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
}

/// What every run report carries: the resolved configuration and the outcome.
#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    config: &'a RunConfig,
    result: T,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AVWATCH_LOG", "info"))
        .format_timestamp(None)
        .init();
    let keys = keys_help();
    let matches = match Cli::command().after_long_help(keys.clone()).after_help(keys).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from this parser");
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve(cli.config.as_deref(), &cli.overrides, cli.deterministic)?;
    match cli.command {
        Command::Synth { out } => synth(&cfg, &out),
        Command::Train { out } => {
            if cfg.train.mode == Mode::DistillUkd {
                return Err(CliError::config("train.mode = distill_ukd: use the distill subcommand"));
            }
            train(&cfg, &out)
        }
        Command::Distill { teacher, out } => {
            cfg.train.mode = Mode::DistillUkd;
            if teacher.is_some() {
                cfg.train.teacher_checkpoint = teacher;
            }
            distill(&cfg, &out)
        }
        Command::Eval {
            checkpoint,
            manifest,
            scores,
            out,
        } => eval(&cfg, checkpoint.as_deref(), &manifest, scores.as_deref(), out.as_deref()),
        Command::Score {
            checkpoint,
            manifest,
            out,
        } => score(&cfg, &checkpoint, &manifest, &out),
        Command::Gradcheck { seeds, filter } => gradcheck(seeds, filter.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = synth_generate(&cfg.synth)?;
    create_dir(out)?;
    let written = write_dataset(&ds, out)?;
    /// Manifest paths are relative to `out`, so the report does not depend on where it was written.
    #[derive(Serialize)]
    struct Body {
        train_videos: usize,
        test_videos: usize,
        train_manifest: PathBuf,
        test_manifest: PathBuf,
    }
    let local = |p: &Path| p.strip_prefix(out).unwrap_or(p).to_path_buf();
    let body = Body {
        train_videos: ds.train.len(),
        test_videos: ds.test.len(),
        train_manifest: local(&written.train_manifest),
        test_manifest: local(&written.test_manifest),
    };
    println!(
        "synthesized {} train / {} test videos (d = {}) under {}",
        body.train_videos,
        body.test_videos,
        cfg.synth.dim,
        out.display()
    );
    println!("  train manifest: {}", written.train_manifest.display());
    println!("  test manifest:  {}", written.test_manifest.display());
    write_json(
        &out.join("synth_report.json"),
        &Report {
            command: "synth",
            config: cfg,
            result: body,
        },
    )
}

fn check_labels(samples: &[VideoSample], classes: usize) -> Result<(), CliError> {
    for s in samples {
        if let Some(&c) = s.label.iter().find(|&&c| c >= classes) {
            return Err(CliError::data(format!(
                "video {}: label {c} outside the {classes} configured classes",
                s.id
            )));
        }
    }
    Ok(())
}

/// Manifests when configured, otherwise the synthetic generator.
fn dataset(cfg: &RunConfig, train: Streams, test: Streams) -> Result<Dataset, CliError> {
    let classes = cfg.classes().to_vec();
    let Some(train_manifest) = &cfg.data.train_manifest else {
        if cfg.data.test_manifest.is_some() {
            return Err(CliError::config("data.test_manifest is set but data.train_manifest is not"));
        }
        let ds = synth_generate(&cfg.synth)?;
        return Ok(Dataset {
            classes: ds.classes.clone(),
            train: ds.train_samples(),
            test: ds.test_samples(),
        });
    };
    let train = load_split(train_manifest, cfg.data.stride, cfg.data.max_len, train)?;
    let test = match &cfg.data.test_manifest {
        Some(p) => load_split(p, cfg.data.stride, cfg.data.max_len, test)?,
        None => Vec::new(),
    };
    check_labels(&train, classes.len())?;
    check_labels(&test, classes.len())?;
    Ok(Dataset { classes, train, test })
}

/// Epoch lines go through the logger (`AVWATCH_LOG`).
fn quiet(_: &EpochLog) {}

fn finish(cfg: &RunConfig, command: &str, out: &Path, trained: Trained) -> Result<(), CliError> {
    let ckpt = out.join("model.avck");
    save_checkpoint(&trained.params, &ckpt)?;
    let r = &trained.report;
    if r.epochs.is_empty() {
        println!("trained 0 epochs: checkpoint holds the initialization");
    } else {
        println!(
            "trained {} epochs: loss {:.6} -> {:.6}",
            r.epochs.len(),
            r.initial_loss,
            r.final_loss().unwrap_or(r.initial_loss)
        );
    }
    println!("  trainable parameters: {}", r.trainable_params);
    if let Some(eval) = &r.final_eval {
        print_eval(eval);
    }
    println!("  checkpoint: {}", ckpt.display());
    println!("  report:     {}", out.join("report.json").display());
    write_json(
        &out.join("report.json"),
        &Report {
            command,
            config: cfg,
            result: r,
        },
    )
}

fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let streams = streams_for(cfg.train.mode.arch());
    let data = dataset(cfg, streams, streams)?;
    let class_base = cfg.data.class_embeddings.as_ref().map(load_class_base).transpose()?;
    create_dir(out)?;
    println!("training {} on {} videos", cfg.train.mode.name(), data.train.len());
    let trained = train_model(&cfg.train, &data, class_base, &mut quiet)?;
    finish(cfg, "train", out, trained)
}

fn distill(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let path = cfg
        .train
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("distillation needs --teacher or train.teacher_checkpoint"))?;
    let teacher = load_checkpoint(path)?;
    let both = Streams {
        visual: true,
        audio: true,
    };
    let data = dataset(cfg, both, streams_for(cfg.train.mode.arch()))?;
    create_dir(out)?;
    println!(
        "distilling a visual student from {} on {} videos",
        path.display(),
        data.train.len()
    );
    let trained = distill_ukd(&cfg.train, &data, &teacher, &mut quiet)?;
    finish(cfg, "distill", out, trained)
}

fn print_eval(r: &EvalReport) {
    match r.frame_ap {
        Some(ap) => println!("  frame AP: {ap:.4}"),
        None => println!("  frame AP: n/a"),
    }
    if let (Some(maps), Some(avg)) = (&r.map_per_iou, r.avg_map) {
        let parts: Vec<String> = r
            .iou_thresholds
            .iter()
            .zip(maps)
            .map(|(t, m)| format!("{t:.1}: {m:.4}"))
            .collect();
        println!("  mAP@IoU {}  AVG {avg:.4}", parts.join("  "));
    }
    for note in &r.notices {
        println!("  note: {note}");
    }
}

/// Class names matching the checkpoint's class count.
fn class_names(cfg: &RunConfig, n: usize) -> Result<Vec<String>, CliError> {
    let names = cfg.classes();
    if names.len() != n {
        return Err(CliError::config(format!(
            "checkpoint has {n} classes but {} class names are configured",
            names.len()
        )));
    }
    Ok(names.to_vec())
}

fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    manifest: &Path,
    scores: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let tau = cfg.train.loss.tau;
    let report = match (checkpoint, scores) {
        (_, Some(dir)) => {
            let classes = cfg.classes().to_vec();
            let samples = load_split(
                manifest,
                cfg.data.stride,
                cfg.data.max_len,
                Streams {
                    visual: true,
                    audio: false,
                },
            )?;
            let dumps = samples
                .iter()
                .map(|s| read_features(dir.join(format!("{}.scores.avfe", s.id))))
                .collect::<Result<Vec<_>, _>>()?;
            evaluate_dumps(&samples, &dumps, &classes, tau)?
        }
        (Some(ckpt), None) => {
            let params = load_checkpoint(ckpt)?;
            let classes = class_names(cfg, params.config.n_classes)?;
            let samples = load_split(manifest, cfg.data.stride, cfg.data.max_len, streams_for(params.arch))?;
            evaluate(&params, &samples, &classes, tau)?
        }
        (None, None) => return Err(CliError::config("eval needs --checkpoint or --scores")),
    };
    println!("evaluated {} videos from {}", report.counts.videos, manifest.display());
    print_eval(&report);
    if let Some(path) = out {
        write_json(
            path,
            &Report {
                command: "eval",
                config: cfg,
                result: &report,
            },
        )?;
    }
    Ok(())
}

fn score(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<(), CliError> {
    let params: ModelParams = load_checkpoint(checkpoint)?;
    let samples = load_split(manifest, cfg.data.stride, cfg.data.max_len, streams_for(params.arch))?;
    create_dir(out)?;
    for s in &samples {
        let det = detect_video(&params, s)?;
        write_features(&score_dump(&s.id, &det)?, out.join(format!("{}.scores.avfe", s.id)))?;
    }
    println!("wrote {} score dumps to {}", samples.len(), out.display());
    Ok(())
}

fn gradcheck(seeds: usize, filter: Option<&str>) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::config("--seeds must be positive"));
    }
    let report = run_gradient_suite(seeds, filter)?;
    if report.entries.is_empty() {
        return Err(CliError::config(format!("no gradient check matches {:?}", filter.unwrap_or(""))));
    }
    println!("central differences, eps = {GRAD_EPS:e}, {seeds} seeds per case");
    for e in &report.entries {
        let verdict = if e.worst < GRAD_TOLERANCE { "ok" } else { "FAIL" };
        println!("  {:<24} {:.3e}  {verdict}", e.name, e.worst);
    }
    println!("max relative error: {:.3e} (tolerance {GRAD_TOLERANCE:e})", report.worst());
    if report.passes() {
        Ok(())
    } else {
        Err(CliError::config("gradient check failed"))
    }
}
