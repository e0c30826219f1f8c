//! Mixture of relation experts: gate routing, sparse combination of expert
//! outputs, training with task plus balance loss, and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{
    expert_backward, expert_forward, expert_loss, expert_loss_grad, EntityProbs, ExpertConfig, ExpertForward,
    ExpertParams, PairLabels,
};
use crate::features::TrackletPair;
use crate::gate::{
    accumulate_stats, gate_backward, gate_forward_with_noise, importance_loss, importance_loss_grads, BatchGateStats,
    GateConfig, GateDecision, GateParams,
};
use crate::nn::{Checkpoint, Optimizer, OptimizerKind, ParamStore};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Balance-loss weight.
    pub alpha: f64,
    pub epsilon: f64,
    pub gate_noise: bool,
    pub feature_dim: usize,
    pub fusion_width: usize,
    pub entity_classes: usize,
    pub predicate_classes: usize,
    /// Refinement rounds during training.
    pub train_rounds: usize,
    /// Refinement rounds at inference.
    pub eval_rounds: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_experts: 10,
            top_k: 2,
            alpha: 0.1,
            epsilon: 1e-10,
            gate_noise: true,
            feature_dim: 16,
            fusion_width: 64,
            entity_classes: 5,
            predicate_classes: 5,
            train_rounds: 1,
            eval_rounds: 3,
        }
    }
}

impl ModelConfig {
    pub fn expert_config(&self) -> ExpertConfig {
        ExpertConfig {
            feature_dim: self.feature_dim,
            fusion_width: self.fusion_width,
            entity_classes: self.entity_classes,
            predicate_classes: self.predicate_classes,
        }
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
            noise_enabled: self.gate_noise,
            ..GateConfig::new(self.num_experts, self.top_k, TrackletPair::input_dim(self.feature_dim))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gate_config().validate()?;
        self.expert_config().validate()?;
        if self.train_rounds == 0 || self.eval_rounds == 0 {
            return Err(Error::Config("train_rounds and eval_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.005,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Optimizer::new(self.optimizer, self.learning_rate).map(|_| ())
    }

    fn optimizer(&self) -> Result<Optimizer> {
        Optimizer::new(self.optimizer, self.learning_rate)
    }
}

/// A labelled tracklet pair.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub pair: TrackletPair,
    pub labels: PairLabels,
}

/// Source of gate noise for a batch.
pub enum GateNoise<'a> {
    Off,
    Sampled(&'a mut ChaCha8Rng),
    /// One noise vector per sample.
    Fixed(&'a [Vec<f64>]),
}

/// Forward record of one sample.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub decision: GateDecision,
    /// `(expert index, forward record)` for selected experts only, in selection order.
    pub experts: Vec<(usize, ExpertForward)>,
    pub output: EntityProbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub task: f64,
    pub importance: f64,
    pub total: f64,
}

/// Counts of gate and expert evaluations for each training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub steps: Vec<StepCount>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCount {
    pub samples: u64,
    pub gate_evals: u64,
    pub expert_evals: u64,
}

impl FlopLedger {
    pub fn record(&mut self, count: StepCount) {
        self.steps.push(count);
    }

    pub fn total_expert_evals(&self) -> u64 {
        self.steps.iter().map(|s| s.expert_evals).sum()
    }

    /// True when every recorded step evaluated exactly `k` experts per sample.
    pub fn is_exactly_k(&self, k: u64) -> bool {
        self.steps
            .iter()
            .all(|s| s.expert_evals == k * s.samples && s.gate_evals == s.samples)
    }
}

/// `Σ_i w_i · E_i`, combined independently for each component.
pub fn combine(terms: &[(f64, &EntityProbs)]) -> Result<EntityProbs> {
    let first = terms.first().ok_or_else(|| Error::contract("cannot combine zero expert outputs"))?.1;
    let mut out = EntityProbs::zeros_like(first);
    for (w, p) in terms {
        out.add_scaled(p, *w);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: ModelConfig,
    root_seed: u64,
}

const META_FORMAT: &str = "moevrd-model";

#[derive(Debug, Clone)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub root_seed: u64,
    pub store: ParamStore,
    pub gate: GateParams,
    pub gate_config: GateConfig,
    pub experts: Vec<ExpertParams>,
}

impl MoEModel {
    /// Gate at `gate/...`, experts at `expert/<i>/...`, each expert from its own init substream.
    pub fn new(config: ModelConfig, root_seed: u64) -> Result<Self> {
        config.validate()?;
        let gate_config = config.gate_config();
        let mut store = ParamStore::new();
        let gate = GateParams::new(&mut store, "gate", &gate_config)?;
        let ecfg = config.expert_config();
        let experts = (0..config.num_experts)
            .map(|i| {
                let mut rng = stream_rng(root_seed, "init", i as u64);
                ExpertParams::new(&mut store, &format!("expert/{i}"), &ecfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            root_seed,
            store,
            gate,
            gate_config,
            experts,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn route(&self, x: &[f64], noise: Option<&[f64]>) -> Result<GateDecision> {
        gate_forward_with_noise(
            x,
            self.store.value(self.gate.w_gate),
            self.store.value(self.gate.w_noise),
            &self.gate_config,
            noise,
        )
    }

    /// Gate decision without noise.
    pub fn gate_decision(&self, pair: &TrackletPair) -> Result<GateDecision> {
        self.route(&pair.input(), None)
    }

    /// Routes one pair and evaluates only the selected experts.
    pub fn forward_sample(&self, pair: &TrackletPair, noise: Option<&[f64]>, rounds: usize) -> Result<SampleForward> {
        let decision = self.route(&pair.input(), noise)?;
        let experts = decision
            .selected
            .iter()
            .map(|&i| Ok((i, expert_forward(pair, &self.store, &self.experts[i], rounds)?)))
            .collect::<Result<Vec<_>>>()?;
        let terms: Vec<(f64, &EntityProbs)> = experts.iter().map(|(i, f)| (decision.weights[*i], f.output())).collect();
        let output = combine(&terms)?;
        Ok(SampleForward {
            decision,
            experts,
            output,
        })
    }

    /// Inference-mode prediction: no gate noise, `eval_rounds` refinement rounds.
    pub fn predict(&self, pair: &TrackletPair) -> Result<EntityProbs> {
        Ok(self.forward_sample(pair, None, self.config.eval_rounds)?.output)
    }

    pub fn predict_many(&self, pairs: &[TrackletPair]) -> Result<Vec<EntityProbs>> {
        pairs.par_iter().map(|p| self.predict(p)).collect()
    }

    fn draw_noise(&self, noise: &mut GateNoise<'_>, b: usize) -> Result<Option<Vec<f64>>> {
        match noise {
            GateNoise::Off => Ok(None),
            GateNoise::Sampled(_) if !self.gate_config.noise_enabled => Ok(None),
            GateNoise::Sampled(rng) => Ok(Some(
                (0..self.config.num_experts).map(|_| rng.sample(StandardNormal)).collect(),
            )),
            GateNoise::Fixed(v) => v
                .get(b)
                .cloned()
                .map(Some)
                .ok_or_else(|| Error::contract("fixed gate noise shorter than the batch")),
        }
    }

    fn forward_batch(
        &self,
        batch: &[&TrainingSample],
        noise: &mut GateNoise<'_>,
        rounds: usize,
    ) -> Result<(Vec<SampleForward>, StepLosses, BatchGateStats)> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        let mut fwds = Vec::with_capacity(batch.len());
        let mut task = 0.0;
        for (b, s) in batch.iter().enumerate() {
            let xi = self.draw_noise(noise, b)?;
            let f = self.forward_sample(&s.pair, xi.as_deref(), rounds)?;
            task += expert_loss(&f.output, &s.labels)?;
            fwds.push(f);
        }
        task /= batch.len() as f64;
        let decisions: Vec<GateDecision> = fwds.iter().map(|f| f.decision.clone()).collect();
        let stats = accumulate_stats(&decisions)?;
        let importance = importance_loss(&stats, self.gate_config.alpha, self.gate_config.epsilon);
        let total = task + importance;
        if !total.is_finite() {
            return Err(self.numeric_diagnostics(&fwds, &stats, task, importance));
        }
        Ok((
            fwds,
            StepLosses {
                task,
                importance,
                total,
            },
            stats,
        ))
    }

    fn numeric_diagnostics(&self, fwds: &[SampleForward], stats: &BatchGateStats, task: f64, imp: f64) -> Error {
        let bad = fwds
            .iter()
            .position(|f| !f.output.all_finite() || f.decision.noisy_logits.iter().any(|v| !v.is_finite()));
        let logits = bad.map(|b| format!("{:?}", fwds[b].decision.noisy_logits)).unwrap_or_default();
        Error::Numeric(format!(
            "non-finite loss (task={task}, importance={imp}); first bad sample {bad:?} gate logits {logits}; importance {:?} load {:?}",
            stats.importance, stats.load
        ))
    }

    /// Batch losses without touching gradients.
    pub fn batch_loss(&self, batch: &[&TrainingSample], mut noise: GateNoise<'_>, rounds: usize) -> Result<StepLosses> {
        Ok(self.forward_batch(batch, &mut noise, rounds)?.1)
    }

    /// Batch losses, accumulating gradients of the total loss into `self.store`.
    pub fn loss_and_grad(
        &mut self,
        batch: &[&TrainingSample],
        mut noise: GateNoise<'_>,
        rounds: usize,
    ) -> Result<(StepLosses, BatchGateStats, Vec<SampleForward>)> {
        let (fwds, losses, stats) = self.forward_batch(batch, &mut noise, rounds)?;
        let decisions: Vec<GateDecision> = fwds.iter().map(|f| f.decision.clone()).collect();
        let dimp = importance_loss_grads(&decisions, &stats, self.gate_config.alpha, self.gate_config.epsilon);
        let inv_b = 1.0 / batch.len() as f64;
        for ((s, f), dimp_b) in batch.iter().zip(&fwds).zip(dimp) {
            let dy = expert_loss_grad(&f.output, &s.labels).scaled(inv_b);
            let mut dg = dimp_b;
            for (i, ef) in &f.experts {
                dg[*i] += ef.output().dot(&dy);
                let de = dy.scaled(f.decision.weights[*i]);
                expert_backward(ef, &s.pair, &de, &mut self.store, &self.experts[*i]);
            }
            gate_backward(&s.pair.input(), &f.decision, &dg, &mut self.store, &self.gate, &self.gate_config);
        }
        Ok((losses, stats, fwds))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            format: META_FORMAT.into(),
            config: self.config.clone(),
            root_seed: self.root_seed,
        };
        Checkpoint::from_store(&self.store, serde_json::to_string(&meta).expect("meta serializes"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| Error::Data(format!("checkpoint metadata is not a model description: {e}")))?;
        if meta.format != META_FORMAT {
            return Err(Error::Data(format!("unexpected checkpoint format `{}`", meta.format)));
        }
        let mut model = Self::new(meta.config, meta.root_seed)?;
        model.store.assign(&ck.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Anything that takes optimizer steps on batches.
pub trait StepTrainer {
    fn train_step(&mut self, batch: &[&TrainingSample]) -> Result<(StepLosses, Option<BatchGateStats>)>;
}

/// Trains a [`MoEModel`] with a fixed noise substream.
pub struct MoETrainer {
    pub model: MoEModel,
    pub optimizer: Optimizer,
    pub ledger: FlopLedger,
    noise_rng: ChaCha8Rng,
}

impl MoETrainer {
    pub fn new(model: MoEModel, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let noise_rng = stream_rng(model.root_seed, "gate-noise", 0);
        Ok(Self {
            model,
            optimizer: train.optimizer()?,
            ledger: FlopLedger::default(),
            noise_rng,
        })
    }

    /// Routing-noise stream as it stands before the next step.
    pub fn noise_rng(&self) -> &ChaCha8Rng {
        &self.noise_rng
    }
}

impl StepTrainer for MoETrainer {
    fn train_step(&mut self, batch: &[&TrainingSample]) -> Result<(StepLosses, Option<BatchGateStats>)> {
        let rounds = self.model.config.train_rounds;
        let (losses, stats, fwds) = self.model.loss_and_grad(batch, GateNoise::Sampled(&mut self.noise_rng), rounds)?;
        self.ledger.record(StepCount {
            samples: batch.len() as u64,
            gate_evals: fwds.len() as u64,
            expert_evals: fwds.iter().map(|f| f.experts.len() as u64).sum(),
        });
        self.optimizer.step(&mut self.model.store)?;
        Ok((losses, Some(stats)))
    }
}

/// A single relation expert trained on its own, with the same substreams a
/// one-expert mixture would use.
pub struct BareExpertTrainer {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ExpertParams,
    pub optimizer: Optimizer,
}

impl BareExpertTrainer {
    pub fn new(config: ModelConfig, root_seed: u64, train: &TrainConfig) -> Result<Self> {
        config.validate()?;
        train.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream_rng(root_seed, "init", 0);
        let params = ExpertParams::new(&mut store, "expert/0", &config.expert_config(), &mut rng)?;
        Ok(Self {
            config,
            store,
            params,
            optimizer: train.optimizer()?,
        })
    }
}

impl StepTrainer for BareExpertTrainer {
    fn train_step(&mut self, batch: &[&TrainingSample]) -> Result<(StepLosses, Option<BatchGateStats>)> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        let rounds = self.config.train_rounds;
        let mut fwds = Vec::with_capacity(batch.len());
        let mut task = 0.0;
        for s in batch {
            let f = expert_forward(&s.pair, &self.store, &self.params, rounds)?;
            task += expert_loss(f.output(), &s.labels)?;
            fwds.push(f);
        }
        task /= batch.len() as f64;
        if !task.is_finite() {
            return Err(Error::Numeric(format!("non-finite expert loss {task}")));
        }
        let inv_b = 1.0 / batch.len() as f64;
        for (s, f) in batch.iter().zip(&fwds) {
            let dy = expert_loss_grad(f.output(), &s.labels).scaled(inv_b);
            expert_backward(f, &s.pair, &dy, &mut self.store, &self.params);
        }
        self.optimizer.step(&mut self.store)?;
        let losses = StepLosses {
            task,
            importance: 0.0,
            total: task,
        };
        Ok((losses, None))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub root_seed: u64,
    pub steps: usize,
    pub task_loss: f64,
    pub importance_loss: f64,
    pub total_loss: f64,
    /// Mean per-batch CV of importance.
    pub cv_g: f64,
    /// Mean per-batch CV of load.
    pub cv_l: f64,
    /// Epoch-accumulated importance share per expert.
    pub importance_share: Vec<f64>,
    /// Per-step total losses.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    /// Line-delimited JSON, one record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    /// Every step's total loss in order.
    pub fn step_trace(&self) -> Vec<f64> {
        self.epochs.iter().flat_map(|e| e.step_losses.iter().copied()).collect()
    }
}

/// Runs `epochs` passes over `samples`, shuffled from the `shuffle` substream of `root_seed`.
pub fn run_epochs<T: StepTrainer>(
    trainer: &mut T,
    samples: &[TrainingSample],
    train: &TrainConfig,
    root_seed: u64,
    eps: f64,
) -> Result<TrainingLog> {
    train.validate()?;
    let mut log = TrainingLog::default();
    if train.epochs == 0 {
        return Ok(log);
    }
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..train.epochs {
        let mut rng = stream_rng(root_seed, "shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch,
            root_seed,
            steps: 0,
            task_loss: 0.0,
            importance_loss: 0.0,
            total_loss: 0.0,
            cv_g: 0.0,
            cv_l: 0.0,
            importance_share: Vec::new(),
            step_losses: Vec::new(),
        };
        let mut acc: Option<BatchGateStats> = None;
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (losses, stats) = trainer.train_step(&batch)?;
            rec.steps += 1;
            rec.task_loss += losses.task;
            rec.importance_loss += losses.importance;
            rec.total_loss += losses.total;
            rec.step_losses.push(losses.total);
            if let Some(s) = stats {
                rec.cv_g += s.cv_importance(eps);
                rec.cv_l += s.cv_load(eps);
                let a = acc.get_or_insert_with(|| BatchGateStats::zeros(s.importance.len()));
                for (x, y) in a.importance.iter_mut().zip(&s.importance) {
                    *x += y;
                }
                for (x, y) in a.load.iter_mut().zip(&s.load) {
                    *x += y;
                }
            }
        }
        let n = rec.steps as f64;
        rec.task_loss /= n;
        rec.importance_loss /= n;
        rec.total_loss /= n;
        rec.cv_g /= n;
        rec.cv_l /= n;
        rec.importance_share = acc.map(|a| a.importance_share()).unwrap_or_default();
        log.epochs.push(rec);
    }
    Ok(log)
}

/// Trains `model` and optionally writes the final checkpoint.
pub fn fit(
    model: MoEModel,
    samples: &[TrainingSample],
    train: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(MoEModel, TrainingLog, FlopLedger)> {
    let seed = model.root_seed;
    let eps = model.config.epsilon;
    let mut trainer = MoETrainer::new(model, train)?;
    let log = run_epochs(&mut trainer, samples, train, seed, eps)?;
    if let Some(path) = checkpoint {
        trainer.model.save(path)?;
    }
    Ok((trainer.model, log, trainer.ledger))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::iterative_inference;
    use crate::features::{build_pair, BBox, Tracklet};
    use crate::gate::coefficient_of_variation;
    use crate::nn::check_gradients;
    use rand::SeedableRng;

    fn small_config(n: usize, k: usize) -> ModelConfig {
        ModelConfig {
            num_experts: n,
            top_k: k,
            feature_dim: 3,
            fusion_width: 4,
            entity_classes: 3,
            predicate_classes: 2,
            ..ModelConfig::default()
        }
    }

    fn random_samples(seed: u64, n: usize, cfg: &ModelConfig) -> Vec<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut feat = || (0..cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
                let (fa, fb) = (feat(), feat());
                let x0: f64 = rng.random_range(5.0..50.0);
                let a: Vec<BBox> = (0..5).map(|t| BBox::new(t, x0 + t as f64, 10.0, 6.0, 8.0)).collect();
                let b: Vec<BBox> = (1..7).map(|t| BBox::new(t, 20.0, x0 - t as f64 + 10.0, 4.0, 9.0)).collect();
                let pair = build_pair(&Tracklet::new(0, None, a, fa).unwrap(), &Tracklet::new(1, None, b, fb).unwrap()).unwrap();
                let labels = PairLabels {
                    subject: rng.random_range(0..cfg.entity_classes),
                    object: rng.random_range(0..cfg.entity_classes),
                    predicates: (0..cfg.predicate_classes)
                        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                        .collect(),
                };
                TrainingSample { pair, labels }
            })
            .collect()
    }

    fn randomize_gate(model: &mut MoEModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in [model.gate.w_gate, model.gate.w_noise] {
            for v in model.store.value_mut(id).as_mut_slice() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn combine_is_linear() {
        let a = EntityProbs {
            subject: vec![2.0, 0.0],
            predicate: vec![],
            object: vec![],
        };
        let b = EntityProbs {
            subject: vec![0.0, 4.0],
            predicate: vec![],
            object: vec![],
        };
        assert_eq!(combine(&[(0.75, &a), (0.25, &b)]).unwrap().subject, vec![1.5, 1.0]);
        assert!(combine(&[]).is_err());
    }

    #[test]
    fn one_expert_output_is_the_expert() {
        let cfg = small_config(1, 1);
        let model = MoEModel::new(cfg.clone(), 4).unwrap();
        for s in random_samples(1, 5, &cfg) {
            let e = iterative_inference(&s.pair, &model.store, &model.experts[0], cfg.eval_rounds).unwrap();
            assert_eq!(model.predict(&s.pair).unwrap(), e);
        }
    }

    #[test]
    fn sparse_matches_dense_oracle() {
        let cfg = small_config(10, 2);
        for seed in 0..20 {
            let mut model = MoEModel::new(cfg.clone(), seed).unwrap();
            randomize_gate(&mut model, seed + 100);
            let s = &random_samples(seed, 1, &cfg)[0];
            let sparse = model.predict(&s.pair).unwrap();
            let gate = model.gate_decision(&s.pair).unwrap();
            let mut dense = EntityProbs::zeros_like(&sparse);
            for (i, e) in model.experts.iter().enumerate() {
                let out = iterative_inference(&s.pair, &model.store, e, cfg.eval_rounds).unwrap();
                dense.add_scaled(&out, gate.weights[i]);
            }
            for (a, b) in [
                (&sparse.subject, &dense.subject),
                (&sparse.predicate, &dense.predicate),
                (&sparse.object, &dense.object),
            ] {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_sample_batch_loss_by_hand() {
        let cfg = ModelConfig {
            alpha: 0.1,
            ..small_config(3, 2)
        };
        let mut model = MoEModel::new(cfg.clone(), 5).unwrap();
        randomize_gate(&mut model, 6);
        let samples = random_samples(7, 2, &cfg);
        let batch: Vec<&TrainingSample> = samples.iter().collect();
        let losses = model.batch_loss(&batch, GateNoise::Off, 1).unwrap();

        let mut task = 0.0;
        let mut g = [0.0; 3];
        let mut l = [0.0; 3];
        for s in &samples {
            let gd = model.gate_decision(&s.pair).unwrap();
            let mut y = None::<EntityProbs>;
            for &i in &gd.selected {
                let e = iterative_inference(&s.pair, &model.store, &model.experts[i], 1).unwrap();
                match y.as_mut() {
                    None => y = Some(e.scaled(gd.weights[i])),
                    Some(acc) => acc.add_scaled(&e, gd.weights[i]),
                }
                g[i] += gd.weights[i];
                l[i] += gd.weights[i];
            }
            let y = y.unwrap();
            task += -y.subject[s.labels.subject].ln() - y.object[s.labels.object].ln();
            for (p, t) in y.predicate.iter().zip(&s.labels.predicates) {
                task -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
        }
        task /= 2.0;
        let cv = |v: &[f64; 3]| {
            let m = v.iter().sum::<f64>() / 3.0;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0 / (m * m + 1e-10)
        };
        let expected = task + 0.1 * (cv(&g) + cv(&l));
        assert!((losses.total - expected).abs() < 1e-12, "{} vs {expected}", losses.total);
        assert!((coefficient_of_variation(&g, 1e-10).unwrap() - cv(&g)).abs() < 1e-15);
    }

    #[test]
    fn unselected_experts_are_bit_unchanged() {
        let cfg = small_config(6, 2);
        let model = MoEModel::new(cfg.clone(), 8).unwrap();
        let samples = random_samples(9, 40, &cfg);
        let mut trainer = MoETrainer::new(model, &TrainConfig::default()).unwrap();
        for chunk in samples.chunks(4) {
            let before = trainer.model.store.clone();
            let batch: Vec<&TrainingSample> = chunk.iter().collect();
            let mut used = [false; 6];
            // replay the routing the step will see
            let mut rng = trainer.noise_rng.clone();
            for s in &batch {
                let xi: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
                for i in trainer.model.route(&s.pair.input(), Some(&xi)).unwrap().selected {
                    used[i] = true;
                }
            }
            trainer.train_step(&batch).unwrap();
            for (i, e) in trainer.model.experts.iter().enumerate() {
                let same = e.ids().iter().all(|&id| before.value(id) == trainer.model.store.value(id));
                assert_eq!(same, !used[i], "expert {i}");
            }
        }
        assert!(trainer.ledger.is_exactly_k(2));
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let cfg = small_config(3, 2);
        let model = MoEModel::new(cfg.clone(), 1).unwrap();
        let before = model.store.clone();
        let train = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (after, log, _) = fit(model, &random_samples(1, 8, &cfg), &train, None).unwrap();
        assert!(log.epochs.is_empty());
        assert!(before.entries().eq(after.store.entries()));
    }

    #[test]
    fn fit_is_deterministic_and_learns() {
        let cfg = small_config(4, 2);
        let samples = random_samples(2, 64, &cfg);
        let train = TrainConfig {
            epochs: 15,
            batch_size: 8,
            learning_rate: 0.02,
            ..TrainConfig::default()
        };
        let run = || fit(MoEModel::new(cfg.clone(), 3).unwrap(), &samples, &train, None).unwrap().1;
        let (a, b) = (run(), run());
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert!(a.epochs.last().unwrap().task_loss < a.epochs[0].task_loss);
    }

    #[test]
    fn single_expert_trace_matches_bare_expert() {
        let cfg = ModelConfig {
            alpha: 0.0,
            ..small_config(1, 1)
        };
        let samples = random_samples(4, 30, &cfg);
        let train = TrainConfig {
            epochs: 3,
            batch_size: 7,
            ..TrainConfig::default()
        };
        let (_, moe_log, _) = fit(MoEModel::new(cfg.clone(), 11).unwrap(), &samples, &train, None).unwrap();
        let mut bare = BareExpertTrainer::new(cfg.clone(), 11, &train).unwrap();
        let bare_log = run_epochs(&mut bare, &samples, &train, 11, cfg.epsilon).unwrap();
        let (x, y) = (moe_log.step_trace(), bare_log.step_trace());
        assert_eq!(x.len(), 15);
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn full_model_gradient_matches_fd() {
        let cfg = ModelConfig {
            alpha: 0.1,
            train_rounds: 2,
            ..small_config(2, 2)
        };
        let mut model = MoEModel::new(cfg.clone(), 12).unwrap();
        randomize_gate(&mut model, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for e in model.experts.clone() {
            for id in [e.w_e1, e.w_e2, e.w_e3] {
                for v in model.store.value_mut(id).as_mut_slice() {
                    *v = rng.random_range(0.0..0.5);
                }
            }
        }
        assert!(model.num_parameters() <= 1000);
        let samples = random_samples(15, 4, &cfg);
        let batch: Vec<&TrainingSample> = samples.iter().collect();
        let noise: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect()).collect();
        model.loss_and_grad(&batch, GateNoise::Fixed(&noise), 2).unwrap();
        let analytic = model.store.clone();
        let ids: Vec<_> = model.store.ids().collect();
        let template = model.clone();
        let report = check_gradients(&mut model.store, &analytic, &ids, 1e-5, |s| {
            let mut m = template.clone();
            m.store = s.clone();
            m.batch_loss(&batch, GateNoise::Fixed(&noise), 2).unwrap().total
        });
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let cfg = small_config(3, 2);
        let mut model = MoEModel::new(cfg.clone(), 16).unwrap();
        randomize_gate(&mut model, 17);
        let mut buf = Vec::new();
        model.to_checkpoint().write_to(&mut buf).unwrap();
        let back = MoEModel::from_checkpoint(&Checkpoint::read_from(&buf[..]).unwrap()).unwrap();
        let s = &random_samples(18, 1, &cfg)[0];
        assert_eq!(model.predict(&s.pair).unwrap(), back.predict(&s.pair).unwrap());
    }
}
