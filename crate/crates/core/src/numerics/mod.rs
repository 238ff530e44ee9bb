//! Tensors, random streams, reverse-mode differentiation and optimizers.

mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{fit_minibatches, Optimizer, OptimizerKind};
pub use params::{Linear, Mlp, ParamSet};
pub use rng::RngStream;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Norm below which a vector is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// `⟨a,b⟩ / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Err(Error::Degenerate(na.min(nb)));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Sinusoidal features of an integer time step: `[sin(t·ω_i)…, cos(t·ω_i)…]`
/// with `ω_i = base^(-i/half)`.
pub fn sinusoidal_features(t: usize, dim: usize, base: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let w = base.powf(-(i as f64) / half as f64);
        out.push((t as f64 * w).sin());
    }
    for i in 0..half {
        let w = base.powf(-(i as f64) / half as f64);
        out.push((t as f64 * w).cos());
    }
    out
}
