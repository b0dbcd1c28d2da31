//! Elementwise activations, affine maps, softmax and layer normalization,
//! each paired with its hand-derived backward rule.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Componentwise non-expansive activations usable as the cell nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => relu(x),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `y = x·W + b` with `x: r×k`, `W: k×c`, `b: c`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if x.cols() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "linear: input {:?} vs weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let mut y = x.matmul(w);
    if let Some(b) = b {
        if b.len() != w.cols() {
            return Err(Error::ShapeMismatch(format!(
                "linear: bias {:?} vs weight {:?}",
                b.shape(),
                w.shape()
            )));
        }
        for i in 0..y.rows() {
            for (o, bb) in y.row_mut(i).iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
    }
    Ok(y)
}

/// Gradients of [`linear`]: `(dx, dW, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let dx = dy.matmul_nt(w);
    let dw = x.matmul_tn(dy);
    let db = Tensor::from_vec(&[w.cols()], dy.sum_rows()).expect("bias shape");
    (dx, dw, db)
}

/// Softmax of a vector; entries with `mask[i] == false` get probability 0.
/// Computed with max subtraction, so shift invariant.
pub fn softmax(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let max = x
        .iter()
        .enumerate()
        .filter(|(i, _)| live(*i))
        .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
    let mut out: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| if live(i) { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let s = softmax(x.row(i), None);
        out.row_mut(i).copy_from_slice(&s);
    }
    out
}

/// Vector-Jacobian product of softmax: `dx = z ⊙ (dz − ⟨z, dz⟩)`.
pub fn softmax_backward(z: &[f64], dz: &[f64]) -> Vec<f64> {
    let inner: f64 = z.iter().zip(dz).map(|(a, b)| a * b).sum();
    z.iter().zip(dz).map(|(zi, di)| zi * (di - inner)).collect()
}

/// Saved statistics of one layer-norm row.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let h = x.len() as f64;
    let mean = x.iter().sum::<f64>() / h;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat.iter().zip(gain).zip(bias).map(|((xh, g), b)| xh * g + b).collect();
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dx` and accumulates into `dgain`, `dbias`.
pub fn layer_norm_row_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let h = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.xhat[i];
        dbias[i] += dy[i];
    }
    let mean_d = dxhat.iter().sum::<f64>() / h;
    let mean_dx = dxhat.iter().zip(&cache.xhat).map(|(d, x)| d * x).sum::<f64>() / h;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(d, x)| cache.inv_std * (d - mean_d - x * mean_dx))
        .collect()
}

/// Row-wise layer normalization of an `n×h` tensor.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, Vec<LayerNormCache>)> {
    let h = x.cols();
    if h < 2 || gain.len() != h || bias.len() != h {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm: input {:?}, gain {:?}, bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut caches = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let (y, c) = layer_norm_row(x.row(i), gain.data(), bias.data());
        out.row_mut(i).copy_from_slice(&y);
        caches.push(c);
    }
    Ok((out, caches))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_fixed_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(relu(-1.0), 0.0);
        assert!((softplus(-3.0) - 0.048_587_351_573_741_98).abs() < 1e-15);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn softmax_constant_is_uniform_and_shift_invariant() {
        let z = softmax(&[3.0; 4], None);
        assert!(z.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let x = [0.3, -1.2, 2.0];
        let a = softmax(&x, None);
        let b = softmax(&x.map(|v| v + 100.0), None);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked() {
        let z = softmax(&[1.0, 5.0, 1.0], Some(&[true, false, true]));
        assert_eq!(z[1], 0.0);
        assert!((z[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::filled(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let (y, _) = layer_norm(&Tensor::from_rows(&[vec![4.0, 4.0]]).unwrap(), &g, &b).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);

        let (y, _) = layer_norm(&Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap(), &g, &b).unwrap();
        let k = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.at(0, 0) - k).abs() < 1e-15 && (y.at(0, 1) + k).abs() < 1e-15);

        let (y, _) = layer_norm(
            &Tensor::from_rows(&[vec![1.0, 7.0, -2.0]]).unwrap(),
            &Tensor::zeros(&[3]),
            &Tensor::filled(&[3], 0.25),
        )
        .unwrap();
        assert_eq!(y.data(), &[0.25; 3]);
    }

    #[test]
    fn layer_norm_rejects_h1() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(layer_norm(&x, &Tensor::zeros(&[1]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn linear_shape_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[2, 2]);
        assert!(matches!(linear(&x, &w, None), Err(Error::ShapeMismatch(_))));
    }
}
