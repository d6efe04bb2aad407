//! Linear, LayerNorm and embedding layers whose backward pass returns the
//! weight gradients together with per-example squared gradient norms.
//!
//! Every `backward_simultaneous` expects `g` to be the upstream gradient of
//! a loss that is the *mean* over the leading batch axis. The per-example
//! gradients it materializes therefore carry a factor `1/B`, and the
//! reported norm is `(1/B) · Σ_b ‖w′_b‖² · B²`.
//!
//! All per-example work is row-local, so the gradient contributed by an
//! example is computed with the same floating-point operations whether it
//! is processed alone or inside a larger batch.

mod embedding;
mod layernorm;
mod linear;

use std::collections::BTreeMap;

pub use embedding::{EmbeddingLayer, TokenIds};
pub use layernorm::{LayerNormCache, LayerNormLayer};
pub use linear::{linear_perexample_sqnorm_frobenius, LinearLayer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter gradients, keyed by parameter name (`weight`, `bias`,
/// `gamma`, `beta`).
pub type GradMap = BTreeMap<String, Tensor>;

/// Weight gradients plus corrected per-example squared norms for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradOutput {
    /// Sum over the batch of the per-example gradients.
    pub weight_grads: GradMap,
    /// `(1/B) · Σ_b ‖w′_b‖² · B²` for each parameter.
    pub per_example_sqnorms: BTreeMap<String, f64>,
    /// Uncorrected `‖w′_b‖²`, one entry per example.
    pub raw_per_example: BTreeMap<String, Vec<f64>>,
    pub batch_size: usize,
}

impl LayerGradOutput {
    fn new(batch_size: usize) -> Self {
        Self {
            weight_grads: BTreeMap::new(),
            per_example_sqnorms: BTreeMap::new(),
            raw_per_example: BTreeMap::new(),
            batch_size,
        }
    }

    fn insert(&mut self, key: &str, grad: Tensor, raw: Vec<f64>) {
        let corrected = corrected_mean_sqnorm(&raw, self.batch_size);
        self.weight_grads.insert(key.to_string(), grad);
        self.per_example_sqnorms.insert(key.to_string(), corrected);
        self.raw_per_example.insert(key.to_string(), raw);
    }
}

/// Mean of per-example squared norms followed by the `B²` correction for
/// the `1/B` carried by mean-loss gradients.
pub fn corrected_mean_sqnorm(per_example: &[f64], batch_size: usize) -> f64 {
    let b = batch_size as f64;
    let total = per_example.iter().fold(0.0, |acc, s| acc + s);
    1.0 / b * total * (b * b)
}

/// Splits a `B×…×F` tensor into (batch, rows per example).
fn batch_rows(x: &Tensor, features: usize, what: &str) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "{what} must have a batch axis and a feature axis, got {shape:?}"
        )));
    }
    if shape[shape.len() - 1] != features {
        return Err(Error::Shape(format!(
            "{what} trailing extent {} does not match {features}",
            shape[shape.len() - 1]
        )));
    }
    let batch = shape[0];
    if batch == 0 {
        return Err(Error::InvalidArgument(format!("{what} has an empty batch")));
    }
    let rows = shape[1..shape.len() - 1].iter().product();
    Ok((batch, rows))
}

fn same_leading(a: &Tensor, b: &Tensor) -> bool {
    let (sa, sb) = (a.shape(), b.shape());
    sa.len() == sb.len() && sa[..sa.len() - 1] == sb[..sb.len() - 1]
}

/// `acc[k,l] += Σ_n x[n,k]·g[n,l]` over the given rows, n ascending.
fn accumulate_outer(acc: &mut [f64], x: &[f64], g: &[f64], k: usize, l: usize) {
    for (xr, gr) in x.chunks_exact(k).zip(g.chunks_exact(l)) {
        for (&xv, acc_row) in xr.iter().zip(acc.chunks_exact_mut(l)) {
            for (a, &gv) in acc_row.iter_mut().zip(gr) {
                *a += xv * gv;
            }
        }
    }
}

/// `acc[l] += Σ_n g[n,l]`, n ascending.
fn accumulate_rows(acc: &mut [f64], g: &[f64], l: usize) {
    for gr in g.chunks_exact(l) {
        for (a, &gv) in acc.iter_mut().zip(gr) {
            *a += gv;
        }
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

fn sqnorm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |acc, v| acc + v * v)
}
