//! Turning accumulation-slice gradients into `GradStats` for each
//! estimation mode.

use super::config::EstimationMode;
use crate::error::{Error, Result};
use crate::gns::GradStats;
use crate::layers::corrected_mean_sqnorm;

fn sqnorm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |acc, v| acc + v * v)
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

/// `GradStats` from the mean gradient of each accumulation slice.
///
/// `grads` holds one flattened mean gradient per slice, in processing
/// order, for a batch of `batch_size` examples. In `PerExample` mode each
/// slice is a single example.
pub fn capture_mode_norms(
    mode: EstimationMode,
    batch_size: usize,
    grads: &[&[f64]],
) -> Result<GradStats> {
    mode.validate()?;
    let m = grads.len();
    let expected = match mode {
        EstimationMode::PerExample => batch_size,
        _ => mode.slices(),
    };
    if m != expected {
        return Err(Error::InvalidArgument(format!(
            "{mode:?} over a batch of {batch_size} needs {expected} slice gradients, got {m}"
        )));
    }
    mode.check_batch(batch_size)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = grads[0].len();
    if grads.iter().any(|g| g.len() != n) {
        return Err(Error::Shape("slice gradients differ in length".into()));
    }
    // Mean gradients carry weight 1/m in the full-batch mean.
    let contributions: Vec<Vec<f64>> = grads
        .iter()
        .map(|g| g.iter().map(|v| v / m as f64).collect())
        .collect();
    let refs: Vec<&[f64]> = contributions.iter().map(|c| c.as_slice()).collect();
    let norms = SliceNorms::from_contributions(&refs);
    norms.to_stats(mode, batch_size)
}

/// Norm measurements of one parameter set from its per-slice
/// contributions `c_j` to the full-batch mean gradient.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SliceNorms {
    /// `Σ_j c_j`, accumulated from zero in slice order.
    pub total: Vec<f64>,
    /// `‖Σ_j c_j‖²`
    pub big: f64,
    /// `‖c_j‖²` for each slice.
    pub per_slice: Vec<f64>,
    /// `‖Σ_{i≤j} c_i‖²` for each prefix.
    pub prefix: Vec<f64>,
}

impl SliceNorms {
    pub fn from_contributions(contributions: &[&[f64]]) -> Self {
        let n = contributions.first().map_or(0, |c| c.len());
        let mut total = vec![0.0; n];
        let mut per_slice = Vec::with_capacity(contributions.len());
        let mut prefix = Vec::with_capacity(contributions.len());
        for c in contributions {
            per_slice.push(sqnorm(c));
            add_into(&mut total, c);
            prefix.push(sqnorm(&total));
        }
        Self {
            big: sqnorm(&total),
            total,
            per_slice,
            prefix,
        }
    }

    /// `‖G_small‖²` for this parameter set.
    pub fn small_sqnorm(&self, mode: EstimationMode) -> f64 {
        let m = self.per_slice.len();
        match mode {
            EstimationMode::PerExample | EstimationMode::Microbatch { .. } => {
                corrected_mean_sqnorm(&self.per_slice, m)
            }
            EstimationMode::Subbatch { j, .. } => {
                let r = m as f64 / j as f64;
                self.prefix[j - 1] * (r * r)
            }
        }
    }

    pub fn to_stats(&self, mode: EstimationMode, batch_size: usize) -> Result<GradStats> {
        let (b_small, n_small) = small_batch(mode, batch_size);
        GradStats::new(self.big, self.small_sqnorm(mode), batch_size, b_small, n_small)
    }
}

/// `(B_small, n_small)` of a mode at batch size `batch_size`.
pub fn small_batch(mode: EstimationMode, batch_size: usize) -> (usize, usize) {
    match mode {
        EstimationMode::PerExample => (1, batch_size),
        EstimationMode::Microbatch { m } => (batch_size / m, m),
        EstimationMode::Subbatch { m, j } => (j * (batch_size / m), 1),
    }
}
