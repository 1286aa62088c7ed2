//! Command-line driver for the gaze intention pipeline.
//!
//! `gik <command>` runs one stage; `gik pipeline` runs all of them in order,
//! each stage writing into its own directory under `--out`.

pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::error;
use serde_json::json;

use gik_core::{Error, Result};

use crate::config::{Flags, RunConfig};
use crate::stages::write_json;

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 1,
    Data = 2,
    Internal = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn for_error(err: &Error) -> ExitStatus {
        match err {
            Error::Config(_) => ExitStatus::Usage,
            e if e.is_internal() => ExitStatus::Internal,
            _ => ExitStatus::Data,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gik", version, about = "Gaze-grounded intention detection pipeline")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, gaze, transcripts, manifest).
    Synth,
    /// Validate a manifest and write session summaries and the split.
    Ingest,
    /// Render fixation heatmap videos.
    Render,
    /// Label reports and build ground-truth intention sequences.
    Label,
    /// Extract fixed-shape frame features.
    Features,
    /// Predict intention sequences for the evaluation split.
    Predict,
    /// Extract regions of interest for predicted spans.
    #[command(name = "extract-roi")]
    ExtractRoi,
    /// Score predictions against ground truth.
    Evaluate,
    /// Run every stage end to end.
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Render => "render",
            Command::Label => "label",
            Command::Features => "features",
            Command::Predict => "predict",
            Command::ExtractRoi => "extract-roi",
            Command::Evaluate => "evaluate",
            Command::Pipeline => "pipeline",
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("GIK_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, record| writeln!(buf, "{}", record.args()))
        .try_init();
}

/// Checks that every input path named in `cfg` exists before any work starts.
fn check_inputs(cfg: &RunConfig) -> Result<()> {
    let inputs = [&cfg.manifest, &cfg.pred_file, &cfg.gt, &cfg.vocab, &cfg.videos];
    for path in inputs.into_iter().flatten() {
        if !path.exists() {
            return Err(Error::file(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
        }
    }
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::file(&cfg.out, e))
}

fn require<'a>(path: &'a Option<std::path::PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("this command needs {flag}")))
}

fn execute(command: Command, cfg: &RunConfig) -> Result<()> {
    check_inputs(cfg)?;
    if command != Command::Pipeline {
        write_json(&cfg.out.join("run_config.json"), cfg)?;
    }
    match command {
        Command::Synth => stages::synth(cfg).map(drop),
        Command::Ingest => {
            let ds = stages::load_dataset(cfg)?;
            let split = stages::split(cfg, &ds)?;
            stages::write_ingest(cfg, &ds, &split)
        }
        Command::Render => {
            let ds = stages::load_dataset(cfg)?;
            let bases = stages::load_bases(&ds)?;
            let videos = stages::render(cfg, &ds, &bases)?;
            stages::write_videos(cfg, &ds, &videos)
        }
        Command::Label => {
            let ds = stages::load_dataset(cfg)?;
            stages::write_labels(cfg, &stages::label(cfg, &ds)?)
        }
        Command::Features => {
            let ds = stages::load_dataset(cfg)?;
            let bases = stages::load_bases(&ds)?;
            let videos = stages::videos(cfg, &ds, &bases)?;
            stages::write_features(cfg, &stages::features(cfg, &ds, &videos)?)
        }
        Command::Predict => {
            let ds = stages::load_dataset(cfg)?;
            let bases = stages::load_bases(&ds)?;
            let videos = stages::videos(cfg, &ds, &bases)?;
            let features = stages::features(cfg, &ds, &videos)?;
            let labels = stages::label(cfg, &ds)?;
            stages::write_predictions(cfg, &stages::predict(cfg, &ds, &features, &labels)?)
        }
        Command::ExtractRoi => {
            let preds = stages::read_sequences(require(&cfg.pred_file, "--pred-file")?)?;
            let ds = stages::load_dataset(cfg)?;
            let bases = stages::load_bases(&ds)?;
            let videos = stages::videos(cfg, &ds, &bases)?;
            let rois = stages::extract_rois(cfg, &ds, &bases, &videos, &preds)?;
            stages::write_rois(cfg, &ds, &bases, &rois)
        }
        Command::Evaluate => {
            let preds = stages::read_sequences(require(&cfg.pred_file, "--pred-file")?)?;
            let gts = stages::read_sequences(require(&cfg.gt, "--gt")?)?;
            let vocab = stages::default_vocab(cfg)?;
            stages::write_evaluation(cfg, &stages::evaluate(cfg, &preds, &gts, &vocab)?)
        }
        Command::Pipeline => pipeline(cfg),
    }
}

/// Every stage in order, stage `x` writing to `<out>/x`.
fn pipeline(cfg: &RunConfig) -> Result<()> {
    let stage = |name: &str| cfg.with_out(cfg.out.join(name));
    let mut cfg = cfg.clone();
    if cfg.manifest.is_none() {
        cfg.manifest = Some(stages::synth(&stage("synth"))?);
    }
    write_json(&cfg.out.join("run_config.json"), &cfg)?;
    let stage = |name: &str| cfg.with_out(cfg.out.join(name));

    let ds = stages::load_dataset(&cfg)?;
    let split = stages::split(&cfg, &ds)?;
    stages::write_ingest(&stage("ingest"), &ds, &split)?;
    let labels = stages::label(&cfg, &ds)?;
    stages::write_labels(&stage("label"), &labels)?;
    let bases = stages::load_bases(&ds)?;
    let videos = stages::videos(&cfg, &ds, &bases)?;
    if cfg.videos.is_none() {
        stages::write_videos(&stage("render"), &ds, &videos)?;
    }
    let features = stages::features(&cfg, &ds, &videos)?;
    stages::write_features(&stage("features"), &features)?;
    let predictions = stages::predict(&cfg, &ds, &features, &labels)?;
    stages::write_predictions(&stage("predict"), &predictions)?;
    let rois = stages::extract_rois(&cfg, &ds, &bases, &videos, &predictions.preds)?;
    stages::write_rois(&stage("extract-roi"), &ds, &bases, &rois)?;
    let report = stages::evaluate(&cfg, &predictions.preds, &predictions.gt_eval, &labels.vocab)?;
    stages::write_evaluation(&stage("evaluate"), &report)?;

    let spans = rois.values().map(Vec::len).sum::<usize>();
    let nonempty = rois.values().flatten().filter(|(_, r)| !r.bbox.is_empty()).count();
    write_json(
        &cfg.out.join("pipeline.json"),
        &json!({
            "cases": ds.len(),
            "eval_cases": report.n_cases,
            "predictor": predictions.predictor.name(),
            "bleu": report.bleu,
            "cider": report.cider,
            "precision": report.precision,
            "recall": report.recall,
            "roi_spans": spans,
            "roi_nonempty": nonempty,
        }),
    )
}

/// Parses `argv` (program name first), runs the command and reports failures
/// on stderr.
pub fn run<I, T>(argv: I) -> ExitStatus
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitStatus::Success,
                _ => ExitStatus::Usage,
            };
        }
    };
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
        let cfg = RunConfig::resolve(&cli.flags)?;
        execute(cli.command, &cfg)
    }));
    match outcome {
        Ok(Ok(())) => ExitStatus::Success,
        Ok(Err(e)) => {
            error!("{}: {e}", cli.command.name());
            ExitStatus::for_error(&e)
        }
        Err(_) => {
            error!("{}: internal error (panic)", cli.command.name());
            ExitStatus::Internal
        }
    }
}
