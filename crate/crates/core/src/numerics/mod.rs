//! Dense matrices, reverse-mode autodiff and Adam.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use tape::{Axis, Gradients, Param, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

/// Tensor with entries drawn uniformly from `[-scale, scale]`.
pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    Tensor::new(rows, cols, data).expect("sized above")
}

/// Inverted-dropout keep mask: entries are `0` or `1/(1-p)`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(rows, cols, data).expect("sized above")
}

/// Applies inverted dropout when `p > 0` and a stream is supplied.
pub fn dropout<'t>(x: Var<'t>, p: f64, rng: Option<&mut rand_chacha::ChaCha8Rng>) -> crate::Result<Var<'t>> {
    match rng {
        Some(rng) if p > 0.0 => {
            let [r, c] = x.shape();
            let mask = x.tape().constant(dropout_mask(r, c, p, rng));
            x.mul(mask)
        }
        _ => Ok(x),
    }
}

/// Row-vector kernels for tape-free incremental decoding.
pub(crate) mod rows {
    use super::Tensor;

    /// `x · w` for a `1 × k` row and a `k × n` matrix.
    pub fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
        let n = w.cols();
        let mut out = vec![0.0; n];
        super::tensor::matmul_into(x, w.data(), &mut out, 1, x.len(), n);
        out
    }

    pub fn add_assign(a: &mut [f64], b: &[f64]) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }

    pub fn layer_norm(x: &mut [f64], gain: &[f64], bias: &[f64]) {
        let c = x.len() as f64;
        let mean = x.iter().sum::<f64>() / c;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
        let is = 1.0 / (var + super::tape::LAYER_NORM_EPS).sqrt();
        for ((v, g), b) in x.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * is * g + b;
        }
    }

    /// Softmax weights of `scores` in place.
    pub fn softmax(scores: &mut [f64]) {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in scores.iter_mut() {
            *s /= total;
        }
    }

    pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_total = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        logits.iter().map(|v| v - max - log_total).collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}
