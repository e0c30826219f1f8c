//! Command implementations behind the `moevrd` binary. Each returns a
//! printable summary and writes its files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{gate_stats, k_sweep, GateStatsReport, SweepTable};
use crate::config::RunConfig;
use crate::data::{read_predictions, write_json, write_predictions, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{fit, MoEModel, ModelConfig};
use crate::pipeline::{check_compatible, predict_dataset};
use crate::synth::{generate_split, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub videos: usize,
    pub tracklets: usize,
    pub pairs: usize,
    pub relations: usize,
    pub per_predicate: BTreeMap<String, usize>,
}

impl SplitSummary {
    pub fn of(ds: &Dataset) -> Result<Self> {
        Ok(Self {
            videos: ds.videos.len(),
            tracklets: ds.num_tracklets(),
            pairs: ds.mode_split_report()?.values().sum(),
            relations: ds.relations.len(),
            per_predicate: ds.predicate_counts(),
        })
    }
}

/// Writes `<out>/train`, `<out>/test` and the resolved `<out>/config.toml`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<BTreeMap<String, SplitSummary>> {
    let synth = cfg.synth_config();
    let mut summary = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        let ds = generate_split(&synth, split)?;
        ds.save(&out.join(split.name()))?;
        summary.insert(split.name().to_owned(), SplitSummary::of(&ds)?);
    }
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(summary)
}

/// Model configuration with data-dependent sizes taken from the dataset.
pub fn model_config_for(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        feature_dim: ds.meta.feature_dim,
        entity_classes: ds.meta.entity_classes.len(),
        predicate_classes: ds.meta.predicate_classes.len(),
        ..cfg.model.clone()
    }
}

pub fn default_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_stem().unwrap_or_default().to_os_string();
    name.push(".log.jsonl");
    checkpoint.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub samples: usize,
    pub parameters: usize,
    pub epochs: usize,
    pub first_task_loss: Option<f64>,
    pub final_task_loss: Option<f64>,
    pub expert_evals_per_sample: f64,
    pub log: PathBuf,
}

/// Trains on `data`, writing the checkpoint and a line-delimited log.
/// A numeric failure is recorded in the log before it is returned.
pub fn cmd_train(cfg: &RunConfig, data: &Path, checkpoint: &Path, log: Option<&Path>) -> Result<TrainSummary> {
    let ds = Dataset::load(data)?;
    let samples = ds.training_samples()?;
    let model = MoEModel::new(model_config_for(cfg, &ds), cfg.seed)?;
    let parameters = model.num_parameters();
    let log_path = log.map_or_else(|| default_log_path(checkpoint), Path::to_path_buf);
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match fit(model, &samples, &cfg.train, Some(checkpoint)) {
        Ok((_, train_log, ledger)) => {
            fs::write(&log_path, train_log.to_jsonl()).map_err(|e| Error::io(&log_path, e))?;
            let evals = ledger.total_expert_evals() as f64;
            let seen: u64 = ledger.steps.iter().map(|s| s.samples).sum();
            Ok(TrainSummary {
                samples: samples.len(),
                parameters,
                epochs: train_log.epochs.len(),
                first_task_loss: train_log.epochs.first().map(|e| e.task_loss),
                final_task_loss: train_log.epochs.last().map(|e| e.task_loss),
                expert_evals_per_sample: if seen == 0 { 0.0 } else { evals / seen as f64 },
                log: log_path,
            })
        }
        Err(e) => {
            let line = serde_json::json!({ "error": e.to_string() }).to_string() + "\n";
            let _ = fs::write(&log_path, line);
            Err(e)
        }
    }
}

fn load_compatible(checkpoint: &Path, data: &Path) -> Result<(MoEModel, Dataset)> {
    let model = MoEModel::load(checkpoint)?;
    let ds = Dataset::load(data)?;
    check_compatible(&model, &ds)?;
    Ok((model, ds))
}

/// Scores either a checkpoint's predictions or an existing predictions file.
pub fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    report: Option<&Path>,
) -> Result<MetricsReport> {
    let (preds, ds) = match (checkpoint, predictions) {
        (Some(ck), None) => {
            let (model, ds) = load_compatible(ck, data)?;
            (predict_dataset(&model, &ds, &cfg.eval)?, ds)
        }
        (None, Some(p)) => (read_predictions(p)?, Dataset::load(data)?),
        _ => {
            return Err(Error::Config("eval needs exactly one of --checkpoint or --predictions".into()));
        }
    };
    let metrics = evaluate(&preds, &ds.ground_truth()?, &cfg.eval)?;
    if let Some(path) = report {
        write_json(path, &metrics)?;
    }
    Ok(metrics)
}

/// Writes video-level predictions; returns how many were written.
pub fn cmd_infer(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<usize> {
    let (model, ds) = load_compatible(checkpoint, data)?;
    let preds = predict_dataset(&model, &ds, &cfg.eval)?;
    write_predictions(out, &preds)?;
    Ok(preds.values().map(Vec::len).sum())
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    train: &Path,
    test: &Path,
    ks: Option<&[usize]>,
    out: Option<&Path>,
    plot: Option<&Path>,
) -> Result<SweepTable> {
    let train_ds = Dataset::load(train)?;
    let test_ds = Dataset::load(test)?;
    let model = model_config_for(cfg, &train_ds);
    let ks = ks.unwrap_or(&cfg.sweep.k_values);
    let table = k_sweep(&train_ds, &test_ds, &model, &cfg.train, &cfg.eval, ks, &cfg.sweep.seeds)?;
    if let Some(p) = out {
        write_json(p, &table)?;
    }
    if let Some(p) = plot {
        fs::write(p, table.plot_data()).map_err(|e| Error::io(p, e))?;
    }
    Ok(table)
}

pub fn cmd_gate_stats(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<GateStatsReport> {
    let (model, ds) = load_compatible(checkpoint, data)?;
    let report = gate_stats(&model, &ds)?;
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(report)
}
