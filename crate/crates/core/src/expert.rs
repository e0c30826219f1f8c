//! A single relation expert: shared subject/object visual predictor, a
//! predicate predictor over the fused pair feature, and three preferential
//! predictors that refine each component from the other two.
//!
//! Each dependency tensor `W_e` is a three-way tensor stored as a matrix
//! whose rows index the (flattened) outer product of the two conditioning
//! distributions and whose columns index the refined component's classes:
//!
//! ```text
//! pref_1[i] = Σ_{j,k} p_2[j] · p_3[k] · W_e1[j·|E| + k, i]     W_e1: (|P|·|E|) × |E|
//! pref_2[i] = Σ_{j,k} p_1[j] · p_3[k] · W_e2[j·|E| + k, i]     W_e2: (|E|·|E|) × |P|
//! pref_3[i] = Σ_{j,k} p_1[j] · p_2[k] · W_e3[j·|P| + k, i]     W_e3: (|E|·|P|) × |E|
//! ```
//!
//! Refinement adds the preferential score to the visual probability and
//! renormalizes: `p_1 ← (v_1 + pref_1) / (1 + Σ pref_1)`, which keeps unit
//! mass because `Σ v_1 = 1`. Predicate scores are clamped to
//! `[PRED_MIN, PRED_MAX]`. Dependency tensors are kept nonnegative by the
//! optimizer, so refined entity scores stay on the simplex.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FusionCache, FusionNet, TrackletPair};
use crate::nn::ops::{affine, affine_backward, softmax_unchecked};
use crate::nn::{init_weight, sigmoid, softmax_backward, Matrix, ParamId, ParamStore};

pub const PRED_MIN: f64 = 1e-6;
pub const PRED_MAX: f64 = 1.0 - 1e-6;
/// Floor inside `ln` for the entity cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub feature_dim: usize,
    pub fusion_width: usize,
    pub entity_classes: usize,
    pub predicate_classes: usize,
}

impl ExpertConfig {
    pub fn input_dim(&self) -> usize {
        TrackletPair::input_dim(self.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.fusion_width == 0 {
            return Err(Error::Config("feature_dim and fusion_width must be positive".into()));
        }
        if self.entity_classes < 2 || self.predicate_classes < 1 {
            return Err(Error::Config(format!(
                "need at least 2 entity classes and 1 predicate class, got {} and {}",
                self.entity_classes, self.predicate_classes
            )));
        }
        Ok(())
    }
}

/// Handles to one expert's parameters. `v_ent` serves both the subject and
/// the object classifier.
#[derive(Debug, Clone, Copy)]
pub struct ExpertParams {
    pub fusion: FusionNet,
    pub v_ent: ParamId,
    pub b_ent: ParamId,
    pub v_pred: ParamId,
    pub b_pred: ParamId,
    pub w_e1: ParamId,
    pub w_e2: ParamId,
    pub w_e3: ParamId,
}

impl ExpertParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ExpertConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, f, ce, cp) = (cfg.feature_dim, cfg.fusion_width, cfg.entity_classes, cfg.predicate_classes);
        let fusion = FusionNet::new(store, prefix, cfg.input_dim(), f, rng)?;
        Ok(Self {
            fusion,
            v_ent: store.add(format!("{prefix}/v_ent"), init_weight(rng, d, ce))?,
            b_ent: store.add(format!("{prefix}/b_ent"), Matrix::zeros(1, ce))?,
            v_pred: store.add(format!("{prefix}/v_pred"), init_weight(rng, f, cp))?,
            b_pred: store.add(format!("{prefix}/b_pred"), Matrix::zeros(1, cp))?,
            w_e1: store.add_nonneg(format!("{prefix}/w_e1"), Matrix::zeros(cp * ce, ce))?,
            w_e2: store.add_nonneg(format!("{prefix}/w_e2"), Matrix::zeros(ce * ce, cp))?,
            w_e3: store.add_nonneg(format!("{prefix}/w_e3"), Matrix::zeros(ce * cp, ce))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.fusion.weight,
            self.fusion.bias,
            self.v_ent,
            self.b_ent,
            self.v_pred,
            self.b_pred,
            self.w_e1,
            self.w_e2,
            self.w_e3,
        ]
    }
}

/// Subject / predicate / object class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityProbs {
    pub subject: Vec<f64>,
    pub predicate: Vec<f64>,
    pub object: Vec<f64>,
}

impl EntityProbs {
    pub fn zeros_like(other: &EntityProbs) -> Self {
        Self {
            subject: vec![0.0; other.subject.len()],
            predicate: vec![0.0; other.predicate.len()],
            object: vec![0.0; other.object.len()],
        }
    }

    /// `self += scale · other`, component-wise.
    pub fn add_scaled(&mut self, other: &EntityProbs, scale: f64) {
        for (a, b) in [
            (&mut self.subject, &other.subject),
            (&mut self.predicate, &other.predicate),
            (&mut self.object, &other.object),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scaled(&self, scale: f64) -> Self {
        let mut out = Self::zeros_like(self);
        out.add_scaled(self, scale);
        out
    }

    pub fn dot(&self, other: &EntityProbs) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        d(&self.subject, &other.subject) + d(&self.predicate, &other.predicate) + d(&self.object, &other.object)
    }

    pub fn all_finite(&self) -> bool {
        self.subject.iter().chain(&self.predicate).chain(&self.object).all(|v| v.is_finite())
    }
}

fn clamp_pred(v: f64) -> f64 {
    v.clamp(PRED_MIN, PRED_MAX)
}

/// Bilinear preferential score, see the module docs for the layout.
pub fn preferential_term(w: &Matrix, a: &[f64], b: &[f64]) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (j, &aj) in a.iter().enumerate() {
        for (k, &bk) in b.iter().enumerate() {
            let o = aj * bk;
            if o == 0.0 {
                continue;
            }
            for (acc, &wv) in out.iter_mut().zip(w.row(j * b.len() + k)) {
                *acc += o * wv;
            }
        }
    }
    out
}

fn preferential_backward(w: &Matrix, gw: &mut Matrix, a: &[f64], b: &[f64], dout: &[f64], da: &mut [f64], db: &mut [f64]) {
    let cols = w.cols();
    for (j, &aj) in a.iter().enumerate() {
        for (k, &bk) in b.iter().enumerate() {
            let row = j * b.len() + k;
            let wrow = w.row(row);
            let d_outer: f64 = wrow.iter().zip(dout).map(|(x, y)| x * y).sum();
            da[j] += d_outer * bk;
            db[k] += d_outer * aj;
            let o = aj * bk;
            let grow = &mut gw.as_mut_slice()[row * cols..(row + 1) * cols];
            for (g, &d) in grow.iter_mut().zip(dout) {
                *g += o * d;
            }
        }
    }
}

/// Forward record of one expert on one pair.
#[derive(Debug, Clone)]
pub struct ExpertForward {
    pub input: Vec<f64>,
    pub fusion: FusionCache,
    /// Predicate sigmoid before clamping.
    pub pred_raw: Vec<f64>,
    /// `states[0]` is the visual prediction; `states[r]` follows refinement round `r`.
    pub states: Vec<EntityProbs>,
}

impl ExpertForward {
    pub fn visual(&self) -> &EntityProbs {
        &self.states[0]
    }

    pub fn output(&self) -> &EntityProbs {
        self.states.last().expect("at least the visual state")
    }
}

fn check_dims(pair: &TrackletPair, store: &ParamStore, params: &ExpertParams) -> Result<()> {
    let d = store.value(params.v_ent).rows();
    if pair.f_e1.len() != d || pair.f_e3.len() != d {
        return Err(Error::contract(format!(
            "pair feature dims ({}, {}) do not match expert feature_dim {d}",
            pair.f_e1.len(),
            pair.f_e3.len()
        )));
    }
    Ok(())
}

fn visual_forward(pair: &TrackletPair, store: &ParamStore, params: &ExpertParams) -> Result<ExpertForward> {
    check_dims(pair, store, params)?;
    let input = pair.input();
    let fusion = params.fusion.forward(store, &input)?;
    let v = store.value(params.v_ent);
    let b = store.value(params.b_ent).as_slice();
    let subject = softmax_unchecked(&affine(&pair.f_e1, v, b));
    let object = softmax_unchecked(&affine(&pair.f_e3, v, b));
    let pred_raw: Vec<f64> = affine(&fusion.out, store.value(params.v_pred), store.value(params.b_pred).as_slice())
        .into_iter()
        .map(sigmoid)
        .collect();
    let predicate = pred_raw.iter().copied().map(clamp_pred).collect();
    Ok(ExpertForward {
        input,
        fusion,
        pred_raw,
        states: vec![EntityProbs {
            subject,
            predicate,
            object,
        }],
    })
}

/// Visual predictors only: softmax over entity classes, sigmoid over predicates.
pub fn visual_predict(pair: &TrackletPair, store: &ParamStore, params: &ExpertParams) -> Result<EntityProbs> {
    Ok(visual_forward(pair, store, params)?.states.swap_remove(0))
}

/// One synchronous refinement round from `current`, anchored at `visual`.
pub fn preferential_refine(visual: &EntityProbs, current: &EntityProbs, store: &ParamStore, params: &ExpertParams) -> EntityProbs {
    let renorm = |v: &[f64], a: Vec<f64>| {
        let denom = 1.0 + a.iter().sum::<f64>();
        v.iter().zip(a).map(|(vi, ai)| (vi + ai) / denom).collect::<Vec<f64>>()
    };
    let a1 = preferential_term(store.value(params.w_e1), &current.predicate, &current.object);
    let a2 = preferential_term(store.value(params.w_e2), &current.subject, &current.object);
    let a3 = preferential_term(store.value(params.w_e3), &current.subject, &current.predicate);
    EntityProbs {
        subject: renorm(&visual.subject, a1),
        predicate: visual.predicate.iter().zip(a2).map(|(v, a)| clamp_pred(v + a)).collect(),
        object: renorm(&visual.object, a3),
    }
}

/// Visual prediction followed by `rounds` refinement rounds, keeping every state.
pub fn expert_forward(pair: &TrackletPair, store: &ParamStore, params: &ExpertParams, rounds: usize) -> Result<ExpertForward> {
    let mut fwd = visual_forward(pair, store, params)?;
    for _ in 0..rounds {
        let next = preferential_refine(&fwd.states[0], fwd.output(), store, params);
        fwd.states.push(next);
    }
    Ok(fwd)
}

pub fn iterative_inference(pair: &TrackletPair, store: &ParamStore, params: &ExpertParams, rounds: usize) -> Result<EntityProbs> {
    if rounds == 0 {
        return Err(Error::contract("iterative inference needs at least one round"));
    }
    Ok(expert_forward(pair, store, params, rounds)?.states.pop().expect("non-empty"))
}

/// Accumulates parameter gradients given `grad = ∂L/∂output`.
pub fn expert_backward(fwd: &ExpertForward, pair: &TrackletPair, grad: &EntityProbs, store: &mut ParamStore, params: &ExpertParams) {
    let visual = fwd.states[0].clone();
    let mut dv = EntityProbs::zeros_like(&visual);
    let mut dp = grad.clone();

    for r in (1..fwd.states.len()).rev() {
        let prev = &fwd.states[r - 1];
        let cur = &fwd.states[r];
        let mut dprev = EntityProbs::zeros_like(prev);

        // subject: p1 = (v1 + a1) / (1 + Σa1)
        let a1 = preferential_term(store.value(params.w_e1), &prev.predicate, &prev.object);
        let denom1 = 1.0 + a1.iter().sum::<f64>();
        let dot1: f64 = dp.subject.iter().zip(&cur.subject).map(|(d, p)| d * p).sum();
        let da1: Vec<f64> = dp.subject.iter().map(|d| (d - dot1) / denom1).collect();
        for (g, d) in dv.subject.iter_mut().zip(&dp.subject) {
            *g += d / denom1;
        }
        {
            let (w, gw) = store.value_and_grad_mut(params.w_e1);
            preferential_backward(w, gw, &prev.predicate, &prev.object, &da1, &mut dprev.predicate, &mut dprev.object);
        }

        // predicate: p2 = clamp(v2 + a2)
        let a2 = preferential_term(store.value(params.w_e2), &prev.subject, &prev.object);
        let da2: Vec<f64> = dp
            .predicate
            .iter()
            .zip(visual.predicate.iter().zip(&a2))
            .map(|(d, (v, a))| {
                let c = v + a;
                if (PRED_MIN..=PRED_MAX).contains(&c) {
                    *d
                } else {
                    0.0
                }
            })
            .collect();
        for (g, d) in dv.predicate.iter_mut().zip(&da2) {
            *g += d;
        }
        {
            let (w, gw) = store.value_and_grad_mut(params.w_e2);
            preferential_backward(w, gw, &prev.subject, &prev.object, &da2, &mut dprev.subject, &mut dprev.object);
        }

        // object: p3 = (v3 + a3) / (1 + Σa3)
        let a3 = preferential_term(store.value(params.w_e3), &prev.subject, &prev.predicate);
        let denom3 = 1.0 + a3.iter().sum::<f64>();
        let dot3: f64 = dp.object.iter().zip(&cur.object).map(|(d, p)| d * p).sum();
        let da3: Vec<f64> = dp.object.iter().map(|d| (d - dot3) / denom3).collect();
        for (g, d) in dv.object.iter_mut().zip(&dp.object) {
            *g += d / denom3;
        }
        {
            let (w, gw) = store.value_and_grad_mut(params.w_e3);
            preferential_backward(w, gw, &prev.subject, &prev.predicate, &da3, &mut dprev.subject, &mut dprev.predicate);
        }

        dp = dprev;
    }
    // states[0] is the visual prediction itself
    dv.add_scaled(&dp, 1.0);

    // visual heads
    let ds1 = softmax_backward(&visual.subject, &dv.subject);
    let ds3 = softmax_backward(&visual.object, &dv.object);
    let ds2: Vec<f64> = dv
        .predicate
        .iter()
        .zip(&fwd.pred_raw)
        .map(|(d, &s)| if (PRED_MIN..=PRED_MAX).contains(&s) { d * s * (1.0 - s) } else { 0.0 })
        .collect();

    let mut gb = std::mem::replace(store.grad_mut(params.b_ent), Matrix::zeros(0, 0));
    {
        let (w, gw) = store.value_and_grad_mut(params.v_ent);
        affine_backward(&pair.f_e1, w, &ds1, gw, Some(&mut gb), None);
        affine_backward(&pair.f_e3, w, &ds3, gw, Some(&mut gb), None);
    }
    *store.grad_mut(params.b_ent) = gb;

    let mut gb = std::mem::replace(store.grad_mut(params.b_pred), Matrix::zeros(0, 0));
    let mut dh = vec![0.0; fwd.fusion.out.len()];
    {
        let (w, gw) = store.value_and_grad_mut(params.v_pred);
        affine_backward(&fwd.fusion.out, w, &ds2, gw, Some(&mut gb), Some(&mut dh));
    }
    *store.grad_mut(params.b_pred) = gb;

    params.fusion.backward(store, &fwd.input, &fwd.fusion, &dh);
}

/// Ground-truth labels of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLabels {
    pub subject: usize,
    pub object: usize,
    /// Multi-hot predicate indicator.
    pub predicates: Vec<f64>,
}

impl PairLabels {
    pub fn validate(&self, entity_classes: usize, predicate_classes: usize) -> Result<()> {
        if self.subject >= entity_classes || self.object >= entity_classes {
            return Err(Error::Data(format!(
                "entity label ({}, {}) outside {entity_classes} classes",
                self.subject, self.object
            )));
        }
        if self.predicates.len() != predicate_classes || self.predicates.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!(
                "predicate labels must be a {predicate_classes}-long 0/1 vector"
            )));
        }
        Ok(())
    }
}

/// Cross-entropy on subject and object plus summed binary cross-entropy on predicates.
pub fn expert_loss(probs: &EntityProbs, labels: &PairLabels) -> Result<f64> {
    labels.validate(probs.subject.len(), probs.predicate.len())?;
    let ce = |p: &[f64], y: usize| -p[y].max(LOG_FLOOR).ln();
    let bce: f64 = probs
        .predicate
        .iter()
        .zip(&labels.predicates)
        .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum();
    Ok(ce(&probs.subject, labels.subject) + bce + ce(&probs.object, labels.object))
}

/// `∂ expert_loss / ∂ probs`; labels are assumed validated.
pub fn expert_loss_grad(probs: &EntityProbs, labels: &PairLabels) -> EntityProbs {
    let mut g = EntityProbs::zeros_like(probs);
    if probs.subject[labels.subject] > LOG_FLOOR {
        g.subject[labels.subject] = -1.0 / probs.subject[labels.subject];
    }
    if probs.object[labels.object] > LOG_FLOOR {
        g.object[labels.object] = -1.0 / probs.object[labels.object];
    }
    for ((gp, &p), &y) in g.predicate.iter_mut().zip(&probs.predicate).zip(&labels.predicates) {
        *gp = -y / p + (1.0 - y) / (1.0 - p);
    }
    g
}

/// Mean of [`expert_loss`] over a batch.
pub fn mean_expert_loss(probs: &[EntityProbs], labels: &[PairLabels]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::contract("batch of predictions and labels must be non-empty and aligned"));
    }
    let mut total = 0.0;
    for (p, l) in probs.iter().zip(labels) {
        total += expert_loss(p, l)?;
    }
    Ok(total / probs.len() as f64)
}
