//! Elementwise activations and affine maps, with their derivatives.

use super::Matrix;
use crate::error::{Error, Result};

/// `output[b, j] = Σ_i input[b, i] · weight[i, j] + bias[j]`.
pub fn linear_forward(input: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if input.cols() != weight.rows() || bias.len() != weight.cols() {
        return Err(Error::contract(format!(
            "linear shapes do not conform: input {:?}, weight {:?}, bias {}",
            input.shape(),
            weight.shape(),
            bias.len()
        )));
    }
    let mut out = Matrix::zeros(input.rows(), weight.cols());
    for b in 0..input.rows() {
        let row = out.as_mut_slice()[b * weight.cols()..(b + 1) * weight.cols()].as_mut();
        affine_into(input.row(b), weight, bias, row);
    }
    Ok(out)
}

/// Single-sample affine map, `weight` laid out as `[in × out]`.
pub fn affine(x: &[f64], weight: &Matrix, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; weight.cols()];
    affine_into(x, weight, bias, &mut out);
    out
}

pub(crate) fn affine_into(x: &[f64], weight: &Matrix, bias: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), weight.rows());
    debug_assert_eq!(out.len(), weight.cols());
    out.copy_from_slice(bias);
    let w = weight.as_slice();
    let cols = weight.cols();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let wrow = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(wrow) {
            *o += xi * wij;
        }
    }
}

/// Accumulates the affine-map gradients. `grad_x`, when given, is overwritten.
pub fn affine_backward(
    x: &[f64],
    weight: &Matrix,
    grad_out: &[f64],
    grad_weight: &mut Matrix,
    grad_bias: Option<&mut Matrix>,
    grad_x: Option<&mut [f64]>,
) {
    let cols = weight.cols();
    let gw = grad_weight.as_mut_slice();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let grow = &mut gw[i * cols..(i + 1) * cols];
        for (g, &go) in grow.iter_mut().zip(grad_out) {
            *g += xi * go;
        }
    }
    if let Some(gb) = grad_bias {
        for (g, &go) in gb.as_mut_slice().iter_mut().zip(grad_out) {
            *g += go;
        }
    }
    if let Some(gx) = grad_x {
        let w = weight.as_slice();
        for (i, gxi) in gx.iter_mut().enumerate() {
            let wrow = &w[i * cols..(i + 1) * cols];
            *gxi = wrow.iter().zip(grad_out).map(|(w, g)| w * g).sum();
        }
    }
}

/// `(1/β)·ln(1 + e^(βx))`, evaluated as `max(x, 0) + ln(1 + e^(−β|x|))/β`.
pub fn softplus(x: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    x.max(0.0) + (-(beta * x).abs()).exp().ln_1p() / beta
}

/// d softplus / dx = sigmoid(βx).
pub fn softplus_grad(x: f64, beta: f64) -> f64 {
    sigmoid(beta * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::contract("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("softmax input contains non-finite values"));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Backpropagates through `p = softmax(s)`: `ds = p ⊙ (dp − ⟨p, dp⟩)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - dot)).collect()
}
