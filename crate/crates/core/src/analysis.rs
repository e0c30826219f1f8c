//! K-sweep harness and gate routing statistics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, MetricsReport};
use crate::gate::{coefficient_of_variation, top_k_indices, BatchGateStats};
use crate::model::{fit, MoEModel, ModelConfig, TrainConfig};
use crate::pipeline::{check_compatible, evaluate_model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub map_mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub map_std: f64,
    pub map_per_seed: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub num_experts: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn table(&self) -> String {
        let mut s = format!("{:>3} {:>8} {:>8}  (N={})\n", "K", "mAP", "std", self.num_experts);
        for r in &self.rows {
            s += &format!("{:>3} {:>8.4} {:>8.4}\n", r.k, r.map_mean, r.map_std);
        }
        s
    }

    /// Tab-separated `K  mean  std` lines for plotting.
    pub fn plot_data(&self) -> String {
        let mut s = String::from("k\tmap_mean\tmap_std\n");
        for r in &self.rows {
            s += &format!("{}\t{}\t{}\n", r.k, r.map_mean, r.map_std);
        }
        s
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and evaluates one model.
pub fn train_and_evaluate(
    train: &Dataset,
    test: &Dataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let samples = train.training_samples()?;
    let m = MoEModel::new(model.clone(), seed)?;
    check_compatible(&m, train)?;
    let (m, _, _) = fit(m, &samples, train_cfg, None)?;
    Ok(evaluate_model(&m, test, eval)?.1)
}

/// Trains one model per `(K, seed)` and tabulates test mAP per K.
pub fn k_sweep(
    train: &Dataset,
    test: &Dataset,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: &EvalConfig,
    ks: &[usize],
    seeds: &[u64],
) -> Result<SweepTable> {
    if ks.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one K and one seed".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > base.num_experts) {
        return Err(Error::Config(format!("K={k} outside [1, {}]", base.num_experts)));
    }
    let samples = train.training_samples()?;
    let jobs: Vec<(usize, u64)> = ks.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    let maps: Vec<f64> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let cfg = ModelConfig {
                top_k: k,
                ..base.clone()
            };
            let m = MoEModel::new(cfg, seed)?;
            check_compatible(&m, train)?;
            let (m, _, _) = fit(m, &samples, train_cfg, None)?;
            Ok(evaluate_model(&m, test, eval)?.1.mean_ap)
        })
        .collect::<Result<_>>()?;
    let rows = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let per = maps[i * seeds.len()..(i + 1) * seeds.len()].to_vec();
            let (map_mean, map_std) = mean_std(&per);
            SweepRow {
                k,
                map_mean,
                map_std,
                map_per_seed: per,
                seeds: seeds.to_vec(),
            }
        })
        .collect();
    Ok(SweepTable {
        num_experts: base.num_experts,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStatsReport {
    pub num_experts: usize,
    pub pairs: usize,
    pub importance_share: Vec<f64>,
    pub cv_importance: f64,
    pub cv_load: f64,
    /// Mode label to per-expert counts of pairs whose highest-weight expert it is.
    pub contingency: BTreeMap<String, Vec<usize>>,
}

impl GateStatsReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "pairs {}  CV(g) {:.4}  CV(l) {:.4}\nshare ",
            self.pairs, self.cv_importance, self.cv_load
        );
        s += &self.importance_share.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
        s += "\nmode  top-1 expert counts\n";
        for (m, row) in &self.contingency {
            s += &format!("{m:>4}  {}\n", row.iter().map(|c| format!("{c:>5}")).collect::<Vec<_>>().join(" "));
        }
        s
    }
}

/// Noise-free routing of every segment pair of the dataset.
pub fn gate_stats(model: &MoEModel, ds: &Dataset) -> Result<GateStatsReport> {
    check_compatible(model, ds)?;
    let n = model.config.num_experts;
    let mut stats = BatchGateStats::zeros(n);
    let mut contingency: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut pairs = 0;
    for v in &ds.videos {
        let label = v.meta.mode.map_or_else(|| "none".to_owned(), |m| m.to_string());
        let row = contingency.entry(label).or_insert_with(|| vec![0; n]);
        for seg in v.segment_pairs(ds.meta.segment)? {
            for pair in &seg {
                let d = model.gate_decision(pair)?;
                stats.add(&d.weights);
                row[top_k_indices(&d.weights, 1)[0]] += 1;
                pairs += 1;
            }
        }
    }
    let eps = model.config.epsilon;
    Ok(GateStatsReport {
        num_experts: n,
        pairs,
        importance_share: stats.importance_share(),
        cv_importance: coefficient_of_variation(&stats.importance, eps)?,
        cv_load: coefficient_of_variation(&stats.load, eps)?,
        contingency,
    })
}
