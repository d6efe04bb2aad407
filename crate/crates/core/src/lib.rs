//! Gradient noise scale toolkit.
//!
//! Per-example gradient norms computed alongside the weight gradients of
//! linear, LayerNorm and embedding layers; the unbiased `𝒢²`/`𝒮` estimators
//! and `ℬ_simple`; an estimator-variance simulator; closed-form FLOP and
//! I/O cost accounting; and a deterministic toy training loop that uses all
//! of the above to drive batch-size schedules.

pub mod costmodel;
pub mod error;
pub mod gns;
pub mod layers;
pub mod simulator;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
