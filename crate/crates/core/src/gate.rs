//! Noisy top-K gating, batch importance/load statistics and the
//! coefficient-of-variation balance loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{affine, affine_backward, softmax_unchecked};
use crate::nn::{softplus, softplus_grad, Matrix, ParamId, ParamStore};

/// Forward-pass mode. Gate noise is drawn only in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Scale of the importance loss.
    pub alpha: f64,
    /// Guard in the CV denominator.
    pub epsilon: f64,
    pub input_dim: usize,
    pub noise_enabled: bool,
    #[serde(default = "default_beta")]
    pub softplus_beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl GateConfig {
    pub fn new(num_experts: usize, top_k: usize, input_dim: usize) -> Self {
        Self {
            num_experts,
            top_k,
            alpha: 0.1,
            epsilon: 1e-10,
            input_dim,
            noise_enabled: true,
            softplus_beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= K <= N, got K={} N={}",
                self.top_k, self.num_experts
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.softplus_beta > 0.0) {
            return Err(Error::Config("softplus_beta must be positive".into()));
        }
        Ok(())
    }
}

/// Gating (`w_gate`) and noise (`w_noise`) weights, both `[input_dim × N]`.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub w_gate: ParamId,
    pub w_noise: ParamId,
}

impl GateParams {
    /// Registers zero-initialized gate weights under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &GateConfig) -> Result<Self> {
        let w_gate = store.add(format!("{prefix}/w_gate"), Matrix::zeros(cfg.input_dim, cfg.num_experts))?;
        let w_noise = store.add(format!("{prefix}/w_noise"), Matrix::zeros(cfg.input_dim, cfg.num_experts))?;
        Ok(Self { w_gate, w_noise })
    }
}

/// Sparse routing result for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    /// Selected experts, best first.
    pub selected: Vec<usize>,
    /// Dense gate vector with exactly K nonzero entries.
    pub weights: Vec<f64>,
    pub clean_logits: Vec<f64>,
    pub noisy_logits: Vec<f64>,
    /// Standard-normal draws, empty when no noise was applied.
    pub noise: Vec<f64>,
    /// `W_nᵀx`, the pre-softplus noise scale.
    pub noise_logits: Vec<f64>,
}

impl GateDecision {
    pub fn num_experts(&self) -> usize {
        self.weights.len()
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Gate forward with explicit noise draws (`None` disables noise).
pub fn gate_forward_with_noise(
    x: &[f64],
    w_gate: &Matrix,
    w_noise: &Matrix,
    cfg: &GateConfig,
    noise: Option<&[f64]>,
) -> Result<GateDecision> {
    cfg.validate()?;
    let n = cfg.num_experts;
    if x.len() != cfg.input_dim || w_gate.shape() != (cfg.input_dim, n) || w_noise.shape() != (cfg.input_dim, n) {
        return Err(Error::contract(format!(
            "gate input/weight dims do not match config (x={}, input_dim={}, N={n})",
            x.len(),
            cfg.input_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("gate input contains non-finite values"));
    }
    let zero = vec![0.0; n];
    let clean_logits = affine(x, w_gate, &zero);
    let (noisy_logits, noise, noise_logits) = match noise {
        Some(xi) => {
            if xi.len() != n {
                return Err(Error::contract("noise vector length differs from N"));
            }
            let nl = affine(x, w_noise, &zero);
            let noisy = clean_logits
                .iter()
                .zip(xi)
                .zip(&nl)
                .map(|((c, e), z)| c + e * softplus(*z, cfg.softplus_beta))
                .collect();
            (noisy, xi.to_vec(), nl)
        }
        None => (clean_logits.clone(), Vec::new(), Vec::new()),
    };
    let selected = top_k_indices(&noisy_logits, cfg.top_k);
    let sel_logits: Vec<f64> = selected.iter().map(|&i| noisy_logits[i]).collect();
    let sel_weights = softmax_unchecked(&sel_logits);
    let mut weights = vec![0.0; n];
    for (&i, &w) in selected.iter().zip(&sel_weights) {
        weights[i] = w;
    }
    Ok(GateDecision {
        selected,
        weights,
        clean_logits,
        noisy_logits,
        noise,
        noise_logits,
    })
}

/// Noisy top-K gate. Noise is drawn from `rng` only in train mode with noise enabled.
pub fn gate_forward<R: Rng + ?Sized>(
    x: &[f64],
    store: &ParamStore,
    params: &GateParams,
    cfg: &GateConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<GateDecision> {
    let noise: Option<Vec<f64>> = (mode == Mode::Train && cfg.noise_enabled)
        .then(|| (0..cfg.num_experts).map(|_| rng.sample(StandardNormal)).collect());
    gate_forward_with_noise(
        x,
        store.value(params.w_gate),
        store.value(params.w_noise),
        cfg,
        noise.as_deref(),
    )
}

/// Backpropagates `grad_weights = ∂L/∂G(x)` into the gate parameters.
///
/// The top-K selection is treated as constant; gradients flow through the
/// softmax over selected logits and through the noise magnitude.
pub fn gate_backward(
    x: &[f64],
    decision: &GateDecision,
    grad_weights: &[f64],
    store: &mut ParamStore,
    params: &GateParams,
    cfg: &GateConfig,
) {
    let n = decision.num_experts();
    let dot: f64 = decision.selected.iter().map(|&i| decision.weights[i] * grad_weights[i]).sum();
    let mut d_logit = vec![0.0; n];
    for &i in &decision.selected {
        d_logit[i] = decision.weights[i] * (grad_weights[i] - dot);
    }
    let (w, gw) = store.value_and_grad_mut(params.w_gate);
    affine_backward(x, w, &d_logit, gw, None, None);
    if !decision.noise.is_empty() {
        let d_noise: Vec<f64> = (0..n)
            .map(|i| d_logit[i] * decision.noise[i] * softplus_grad(decision.noise_logits[i], cfg.softplus_beta))
            .collect();
        let (w, gw) = store.value_and_grad_mut(params.w_noise);
        affine_backward(x, w, &d_noise, gw, None, None);
    }
}

/// `var(v) / (mean(v)² + ε)` with population variance.
pub fn coefficient_of_variation(v: &[f64], eps: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::contract("coefficient of variation of an empty vector"));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let denom = mean * mean + eps;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(var / denom)
}

/// Gradient of [`coefficient_of_variation`] w.r.t. each entry.
pub fn cv_gradient(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let denom = mean * mean + eps;
    if denom == 0.0 {
        return vec![0.0; v.len()];
    }
    let mean_term = var * 2.0 * mean / (n * denom * denom);
    v.iter().map(|x| 2.0 * (x - mean) / (n * denom) - mean_term).collect()
}

/// Importance `g` and load `l` summed over a batch of gate vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchGateStats {
    pub importance: Vec<f64>,
    pub load: Vec<f64>,
}

impl BatchGateStats {
    pub fn zeros(n: usize) -> Self {
        Self {
            importance: vec![0.0; n],
            load: vec![0.0; n],
        }
    }

    pub fn add(&mut self, weights: &[f64]) {
        for ((g, l), &w) in self.importance.iter_mut().zip(self.load.iter_mut()).zip(weights) {
            *g += w;
            if w > 0.0 {
                *l += w;
            }
        }
    }

    pub fn cv_importance(&self, eps: f64) -> f64 {
        coefficient_of_variation(&self.importance, eps).unwrap_or(0.0)
    }

    pub fn cv_load(&self, eps: f64) -> f64 {
        coefficient_of_variation(&self.load, eps).unwrap_or(0.0)
    }

    /// Importance normalized to shares summing to one.
    pub fn importance_share(&self) -> Vec<f64> {
        let total: f64 = self.importance.iter().sum();
        if total == 0.0 {
            return vec![0.0; self.importance.len()];
        }
        self.importance.iter().map(|g| g / total).collect()
    }
}

pub fn accumulate_stats(decisions: &[GateDecision]) -> Result<BatchGateStats> {
    let n = decisions.first().map_or(0, GateDecision::num_experts);
    let mut stats = BatchGateStats::zeros(n);
    for d in decisions {
        if d.num_experts() != n {
            return Err(Error::contract(format!(
                "gate decisions mix expert counts ({n} vs {})",
                d.num_experts()
            )));
        }
        stats.add(&d.weights);
    }
    Ok(stats)
}

/// `α · (CV(g) + CV(l))`.
pub fn importance_loss(stats: &BatchGateStats, alpha: f64, eps: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    alpha * (stats.cv_importance(eps) + stats.cv_load(eps))
}

/// `∂ importance_loss / ∂ G(x_b)` for each sample of the batch.
pub fn importance_loss_grads(decisions: &[GateDecision], stats: &BatchGateStats, alpha: f64, eps: f64) -> Vec<Vec<f64>> {
    let n = stats.importance.len();
    if alpha == 0.0 || n == 0 {
        return vec![vec![0.0; n]; decisions.len()];
    }
    let dg = cv_gradient(&stats.importance, eps);
    let dl = cv_gradient(&stats.load, eps);
    decisions
        .iter()
        .map(|d| {
            (0..n)
                .map(|i| {
                    let load_part = if d.weights[i] > 0.0 { dl[i] } else { 0.0 };
                    alpha * (dg[i] + load_part)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fixed_gate(logits: &[f64], k: usize) -> GateDecision {
        // x = e_i picks row i of W_g; use identity weights so logits = x.
        let n = logits.len();
        let cfg = GateConfig {
            noise_enabled: false,
            ..GateConfig::new(n, k, n)
        };
        gate_forward_with_noise(logits, &Matrix::identity(n), &Matrix::zeros(n, n), &cfg, None).unwrap()
    }

    #[test]
    fn single_expert_always_weight_one() {
        let cfg = GateConfig::new(1, 1, 3);
        let mut store = ParamStore::new();
        let p = GateParams::new(&mut store, "gate", &cfg).unwrap();
        store.value_mut(p.w_gate).as_mut_slice().copy_from_slice(&[0.3, -2.0, 5.0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for mode in [Mode::Train, Mode::Eval] {
            let d = gate_forward(&[1.0, 2.0, -0.5], &store, &p, &cfg, mode, &mut rng).unwrap();
            assert_eq!(d.weights, vec![1.0]);
            assert_eq!(d.selected, vec![0]);
        }
    }

    #[test]
    fn symmetric_logits_split_evenly() {
        let d = fixed_gate(&[0.0, 0.0, 0.0], 3);
        for w in d.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn top_two_softmax_by_hand() {
        let d = fixed_gate(&[2.0, 1.0, 0.0, -1.0], 2);
        assert_eq!(d.selected, vec![0, 1]);
        let e = std::f64::consts::E;
        assert!((d.weights[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((d.weights[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(&d.weights[2..], &[0.0, 0.0]);
        assert!((d.weights[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 1.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.0, 0.0, 0.0], 1), vec![0]);
    }

    #[test]
    fn k_greater_than_n_is_config_error() {
        let cfg = GateConfig::new(2, 3, 2);
        let err = gate_forward_with_noise(&[0.0, 0.0], &Matrix::zeros(2, 2), &Matrix::zeros(2, 2), &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn eval_mode_is_pure() {
        let cfg = GateConfig::new(4, 2, 3);
        let mut store = ParamStore::new();
        let p = GateParams::new(&mut store, "gate", &cfg).unwrap();
        store.value_mut(p.w_gate).as_mut_slice().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        store.value_mut(p.w_noise).fill(1.0);
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = [0.2, -0.4, 0.9];
        let a = gate_forward(&x, &store, &p, &cfg, Mode::Eval, &mut r1).unwrap();
        let b = gate_forward(&x, &store, &p, &cfg, Mode::Eval, &mut r2).unwrap();
        assert_eq!(a, b);
        assert!(a.noise.is_empty());
        let c = gate_forward(&x, &store, &p, &cfg, Mode::Train, &mut r1).unwrap();
        assert_eq!(c.noise.len(), 4);
        assert_ne!(c.noisy_logits, c.clean_logits);
    }

    #[test]
    fn cv_examples() {
        assert!(coefficient_of_variation(&[5.0, 5.0, 5.0], 1e-10).unwrap().abs() < 1e-12);
        assert_eq!(coefficient_of_variation(&[1.0, 3.0], 0.0).unwrap(), 0.25);
        assert_eq!(coefficient_of_variation(&[0.0, 0.0], 1e-10).unwrap(), 0.0);
        assert!(coefficient_of_variation(&[], 1e-10).is_err());
    }

    #[test]
    fn importance_loss_examples() {
        let s = BatchGateStats {
            importance: vec![1.0, 3.0],
            load: vec![1.0, 3.0],
        };
        assert_eq!(importance_loss(&s, 0.0, 0.0), 0.0);
        assert!((importance_loss(&s, 0.1, 0.0) - 0.05).abs() < 1e-15);
        let balanced = BatchGateStats {
            importance: vec![2.0; 4],
            load: vec![2.0; 4],
        };
        assert!(importance_loss(&balanced, 0.1, 1e-10).abs() < 1e-12);
    }

    #[test]
    fn stats_accumulate() {
        let mk = |w: Vec<f64>| GateDecision {
            selected: vec![],
            weights: w,
            clean_logits: vec![],
            noisy_logits: vec![],
            noise: vec![],
            noise_logits: vec![],
        };
        let s = accumulate_stats(&[mk(vec![1.0, 0.0])]).unwrap();
        assert_eq!(s.importance, vec![1.0, 0.0]);
        assert_eq!(s.load, vec![1.0, 0.0]);
        let s = accumulate_stats(&[mk(vec![0.5, 0.5, 0.0]), mk(vec![0.0, 0.25, 0.75])]).unwrap();
        assert_eq!(s.importance, vec![0.5, 0.75, 0.75]);
        assert!(accumulate_stats(&[mk(vec![1.0]), mk(vec![0.5, 0.5])]).is_err());
    }

    #[test]
    fn stats_match_column_sums() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cfg = GateConfig::new(6, 2, 4);
        let w = Matrix::from_vec(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let wn = Matrix::from_vec(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let decisions: Vec<_> = (0..100)
            .map(|_| {
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let xi: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
                gate_forward_with_noise(&x, &w, &wn, &cfg, Some(&xi)).unwrap()
            })
            .collect();
        let stats = accumulate_stats(&decisions).unwrap();
        for j in 0..6 {
            let mut col = 0.0;
            for d in &decisions {
                col += d.weights[j];
            }
            assert_eq!(stats.importance[j], col);
        }
        let total: f64 = stats.importance.iter().sum();
        assert!((total - 100.0).abs() < 1e-9);
    }

    #[test]
    fn cv_gradient_matches_finite_differences() {
        let v = [0.3, 2.5, 1.1, 0.0, 4.2];
        let g = cv_gradient(&v, 1e-3);
        for i in 0..v.len() {
            let mut p = v;
            let mut m = v;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (coefficient_of_variation(&p, 1e-3).unwrap() - coefficient_of_variation(&m, 1e-3).unwrap()) / 2e-6;
            assert!(crate::nn::relative_error(g[i], fd) < 1e-6, "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn importance_loss_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let cfg = GateConfig {
            alpha: 0.1,
            ..GateConfig::new(4, 2, 3)
        };
        let mut store = ParamStore::new();
        let p = GateParams::new(&mut store, "gate", &cfg).unwrap();
        for id in [p.w_gate, p.w_noise] {
            store.value_mut(id).as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        // Shift logits toward expert 0 so the batch is unbalanced.
        for r in 0..3 {
            let v = store.value(p.w_gate).get(r, 0);
            store.value_mut(p.w_gate).set(r, 0, v + 1.0);
        }
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..8)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let xi: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
                (x, xi)
            })
            .collect();
        let loss = |s: &ParamStore| {
            let ds: Vec<_> = batch
                .iter()
                .map(|(x, xi)| gate_forward_with_noise(x, s.value(p.w_gate), s.value(p.w_noise), &cfg, Some(xi)).unwrap())
                .collect();
            importance_loss(&accumulate_stats(&ds).unwrap(), cfg.alpha, cfg.epsilon)
        };
        let ds: Vec<_> = batch
            .iter()
            .map(|(x, xi)| gate_forward_with_noise(x, store.value(p.w_gate), store.value(p.w_noise), &cfg, Some(xi)).unwrap())
            .collect();
        let stats = accumulate_stats(&ds).unwrap();
        let grads = importance_loss_grads(&ds, &stats, cfg.alpha, cfg.epsilon);
        for ((x, _), (d, g)) in batch.iter().zip(ds.iter().zip(&grads)) {
            gate_backward(x, d, g, &mut store, &p, &cfg);
        }
        assert!(store.grad(p.w_gate).as_slice().iter().any(|&g| g.abs() > 1e-6));
        let analytic = store.clone();
        let report = crate::nn::check_gradients(&mut store, &analytic, &[p.w_gate, p.w_noise], 1e-5, loss);
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    proptest::proptest! {
        #[test]
        fn decisions_are_sparse_and_normalized(
            n in 1usize..12,
            kf in 0.0f64..1.0,
            seed in proptest::prelude::any::<u64>(),
        ) {
            use rand::Rng;
            let k = 1 + ((n - 1) as f64 * kf) as usize;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = GateConfig::new(n, k, 3);
            let w = Matrix::from_vec(3, n, (0..3 * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let wn = Matrix::from_vec(3, n, (0..3 * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let d = gate_forward_with_noise(&x, &w, &wn, &cfg, Some(&xi)).unwrap();
            proptest::prop_assert_eq!(d.selected.len(), k);
            let nonzero = d.weights.iter().filter(|&&w| w != 0.0).count();
            proptest::prop_assert_eq!(nonzero, k);
            proptest::prop_assert!(d.weights.iter().all(|&w| w >= 0.0));
            let sum: f64 = d.weights.iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() <= 1e-12);
            // selected are the argmax-K of the noisy logits
            let min_sel = d.selected.iter().map(|&i| d.noisy_logits[i]).fold(f64::INFINITY, f64::min);
            for j in 0..n {
                if !d.selected.contains(&j) {
                    proptest::prop_assert!(d.noisy_logits[j] <= min_sel);
                }
            }
        }
    }
}
