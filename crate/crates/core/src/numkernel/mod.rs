//! Dense linear algebra, seeded randomness and a finite-difference oracle.

mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use matrix::{axpy_scale, dot, matmul, Matrix};
pub use rng::{derive_seed, gaussian_init, RngStream};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// `ln Σ exp(zᵢ)`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}
