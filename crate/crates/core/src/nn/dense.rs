use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{affine, affine_backward, sigmoid, softplus, softplus_grad};
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Softplus { beta: f64 },
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Softplus { beta } => softplus(z, beta),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Softplus { beta } => softplus_grad(z, beta),
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

/// Normal init scaled by `1/sqrt(fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("finite init")
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Matrix,
    pre: Matrix,
}

/// Fully connected layer that records its forward pass for a later backward.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    cache: Option<DenseCache>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{path}/weight"), init_weight(rng, inputs, outputs))?;
        let bias = store.add(format!("{path}/bias"), Matrix::zeros(1, outputs))?;
        Ok(Self {
            weight,
            bias,
            activation,
            cache: None,
        })
    }

    pub fn forward(&mut self, store: &ParamStore, input: &Matrix) -> Result<Matrix> {
        let w = store.value(self.weight);
        let b = store.value(self.bias).as_slice();
        let pre = super::ops::linear_forward(input, w, b)?;
        let mut out = pre.clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = self.activation.apply(*v));
        self.cache = Some(DenseCache {
            input: input.clone(),
            pre,
        });
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, store: &mut ParamStore, grad_out: &Matrix) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::contract("backward called without a recorded forward pass"))?;
        if grad_out.shape() != cache.pre.shape() {
            return Err(Error::contract("gradient shape does not match forward output"));
        }
        let (batch, inputs) = cache.input.shape();
        let mut grad_in = Matrix::zeros(batch, inputs);
        let mut gb = std::mem::replace(store.grad_mut(self.bias), Matrix::zeros(0, 0));
        for b in 0..batch {
            let dz: Vec<f64> = grad_out
                .row(b)
                .iter()
                .zip(cache.pre.row(b))
                .map(|(g, &z)| g * self.activation.derivative(z))
                .collect();
            let (w, gw) = store.value_and_grad_mut(self.weight);
            let gx = &mut grad_in.as_mut_slice()[b * inputs..(b + 1) * inputs];
            affine_backward(cache.input.row(b), w, &dz, gw, Some(&mut gb), Some(gx));
        }
        *store.grad_mut(self.bias) = gb;
        Ok(grad_in)
    }
}

/// Single-sample forward through a stored affine layer; no caching.
pub fn dense_apply(store: &ParamStore, weight: ParamId, bias: ParamId, x: &[f64], act: Activation) -> Vec<f64> {
    let mut out = affine(x, store.value(weight), store.value(bias).as_slice());
    out.iter_mut().for_each(|v| *v = act.apply(*v));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backward_without_forward_is_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut layer = Dense::new(&mut store, "l", 2, 2, Activation::Identity, &mut rng).unwrap();
        let err = layer.backward(&mut store, &Matrix::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn zero_loss_gives_zero_grads() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mut layer = Dense::new(&mut store, "l", 3, 2, Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let y = layer.forward(&store, &x).unwrap();
        // loss = 0 · Σy
        let g = Matrix::zeros(y.rows(), y.cols());
        layer.backward(&mut store, &g).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            assert!(store.grad(id).as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scalar_chain_rule() {
        // loss = w·x with x = 2
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_vec(1, 1, vec![0.7]).unwrap()).unwrap();
        let b = store.add("b", Matrix::zeros(1, 1)).unwrap();
        let mut layer = Dense {
            weight: w,
            bias: b,
            activation: Activation::Identity,
            cache: None,
        };
        let x = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let y = layer.forward(&store, &x).unwrap();
        assert!((y.get(0, 0) - 1.4).abs() < 1e-15);
        layer.backward(&mut store, &Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(store.grad(w).get(0, 0), 2.0);
    }
}
