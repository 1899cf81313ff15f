//! `train` and `benchmark`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gphme::checkpoint::Checkpoint;
use gphme::data::{load_csv, make_folds, synth_rings, Dataset, Standardizer};
use gphme::eval::{compare, cross_validate, render_table, MetricReport, WelchComparison};
use gphme::model::TreeModel;
use gphme::rng::derive_seed;
use gphme::train::{fit, TrainEvent, TrainReport};
use serde::Serialize;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";
pub const FOLDS_FILE: &str = "folds.json";

const STREAM_MODEL_INIT: u64 = 0x30DE1;

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(s) = &cfg.data.synthetic {
        return Ok(synth_rings(s.n, s.noise, s.seed)?);
    }
    let Some(path) = &cfg.data.path else {
        bail!("data: set either `path` or `synthetic`");
    };
    Ok(load_csv(path, &cfg.csv_schema())?)
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create output directory {}", cfg.output_dir.display()))?;
    write_file(&cfg.output_dir.join(EFFECTIVE_CONFIG_FILE), cfg.to_toml()?.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub report: TrainReport,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    dataset: &'a str,
    rows: usize,
    tree_size: usize,
    epochs_completed: usize,
    steps: u64,
    seconds: f64,
    stopped_by_time_budget: bool,
    final_pelbo: Option<f64>,
}

/// Fits one model on the whole dataset and writes its checkpoint and training log.
///
/// With `resume`, an existing checkpoint in the output directory that carries a
/// training state is continued up to the configured epoch count.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    prepare_output(cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let standardizer = Standardizer::fit(&data, &all);
    let train = standardizer.apply(&data);
    let train_cfg = cfg.train_config();
    let checkpoint_path = cfg.output_dir.join(CHECKPOINT_FILE);

    let (mut model, state) = match resume.then(|| Checkpoint::load(&checkpoint_path)).transpose()? {
        Some(Checkpoint { model, train_state: Some(state), .. }) => {
            log::info!("resuming from epoch {} (step {})", state.epoch, state.global_step);
            (model, Some(state))
        }
        Some(_) => bail!("{} has no training state to resume from", checkpoint_path.display()),
        None => {
            let spec = cfg.model_spec(data.input_dim(), data.task())?;
            (TreeModel::new(&spec, derive_seed(cfg.seed, &[STREAM_MODEL_INIT]))?, None)
        }
    };

    let log_path = cfg.output_dir.join(TRAIN_LOG_FILE);
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(state.is_some())
        .truncate(state.is_none())
        .open(&log_path)
        .with_context(|| format!("cannot open {}", log_path.display()))?;
    let mut log_error = None;
    let report = fit(&mut model, &train, &train_cfg, state, &mut |ev| {
        if let TrainEvent::Epoch(rec) = ev {
            log::info!("epoch {}: pelbo {:.4}, loss {:.4}", rec.epoch, rec.pelbo, rec.train_loss);
            let line = serde_json::to_string(rec).map_err(anyhow::Error::from);
            if let Err(e) = line.and_then(|l| Ok(writeln!(log_file, "{l}")?)) {
                log_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.context(format!("cannot write {}", log_path.display())));
    }

    let mut checkpoint = Checkpoint::new(model);
    checkpoint.standardizer = Some(standardizer);
    if data.labels().is_some() {
        checkpoint.class_values = Some(data.class_values.clone());
    }
    checkpoint.train_state = Some(report.state.clone());
    write_file(&checkpoint_path, checkpoint.to_json()?.as_bytes())?;

    let summary = TrainSummary {
        dataset: &data.name,
        rows: data.len(),
        tree_size: checkpoint.model.tree_size(),
        epochs_completed: report.state.epoch,
        steps: report.steps,
        seconds: report.seconds,
        stopped_by_time_budget: report.stopped_by_time_budget,
        final_pelbo: report.epochs.last().map(|e| e.pelbo),
    };
    write_file(&cfg.output_dir.join(TRAIN_SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(TrainOutcome { checkpoint, checkpoint_path, report })
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkOutcome {
    pub model: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<WelchComparison>,
}

/// Runs the fold protocol for `cfg` and, if given, for a baseline config on the same folds.
pub fn cmd_benchmark(cfg: &RunConfig, baseline: Option<&RunConfig>) -> Result<BenchmarkOutcome> {
    cfg.validate()?;
    if let Some(b) = baseline {
        b.validate().context("baseline config")?;
    }
    let data = load_dataset(cfg)?;
    prepare_output(cfg)?;
    let plan = cfg.fold_plan();
    let folds = make_folds(&data, &plan)?;
    write_file(&cfg.output_dir.join(FOLDS_FILE), serde_json::to_string(&folds)?.as_bytes())?;
    if plan.n_folds == 1 {
        log::warn!("single fold: no spread across folds and no significance test");
    }

    let spec = cfg.model_spec(data.input_dim(), data.task())?;
    let (model, _) = cross_validate(&cfg.label(), &data, &plan, &spec, &cfg.train_config())?;

    let baseline_report = match baseline {
        Some(b) => {
            write_file(&cfg.output_dir.join("baseline_config.toml"), b.to_toml()?.as_bytes())?;
            let spec = b.model_spec(data.input_dim(), data.task())?;
            // Same data and fold plan, so both models see identical splits.
            let (r, _) = cross_validate(&b.label(), &data, &plan, &spec, &b.train_config())?;
            Some(r)
        }
        None => None,
    };
    let comparison = match &baseline_report {
        Some(b) if plan.n_folds > 1 => Some(compare(&model, b)?),
        _ => None,
    };

    let outcome = BenchmarkOutcome { model, baseline: baseline_report, comparison };
    let mut reports = vec![outcome.model.clone()];
    reports.extend(outcome.baseline.clone());
    write_file(&cfg.output_dir.join(REPORT_FILE), serde_json::to_string_pretty(&outcome)?.as_bytes())?;
    write_file(
        &cfg.output_dir.join(TABLE_FILE),
        render_table(&reports, outcome.comparison.as_ref()).as_bytes(),
    )?;
    Ok(outcome)
}
