//! Training configuration and its JSON form (`schema_version: 1`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Learning-rate multiplier as a function of training progress.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LrDecay {
    #[default]
    Constant,
    /// Linear from 1 down to `final_fraction` over the token budget.
    Linear { final_fraction: f64 },
}

impl LrDecay {
    pub fn factor(&self, tokens: u64, total: u64) -> f64 {
        match *self {
            LrDecay::Constant => 1.0,
            LrDecay::Linear { final_fraction } => {
                let p = (tokens as f64 / total as f64).min(1.0);
                1.0 - (1.0 - final_fraction) * p
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Fixed {
        batch_size: usize,
    },
    /// Linear in tokens processed from `b_start` to `b_end`, then flat.
    LinearRamp {
        b_start: usize,
        b_end: usize,
        ramp_tokens: u64,
    },
}

impl ScheduleSpec {
    /// Batch size (in sequences) for the step starting at `tokens`:
    /// `round(B_start + (B_end − B_start)·min(τ/ramp, 1))`, halves rounded
    /// up, never below 1.
    pub fn batch_size_at(&self, tokens: u64) -> usize {
        match *self {
            ScheduleSpec::Fixed { batch_size } => batch_size,
            ScheduleSpec::LinearRamp {
                b_start,
                b_end,
                ramp_tokens,
            } => {
                let frac = if ramp_tokens == 0 {
                    1.0
                } else {
                    (tokens as f64 / ramp_tokens as f64).min(1.0)
                };
                let b = b_start as f64 + (b_end as f64 - b_start as f64) * frac;
                ((b + 0.5).floor() as usize).max(1)
            }
        }
    }

    pub fn final_batch_size(&self) -> usize {
        match *self {
            ScheduleSpec::Fixed { batch_size } => batch_size,
            ScheduleSpec::LinearRamp { b_end, .. } => b_end,
        }
    }
}

/// How `‖G_small‖²` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimationMode {
    /// Per-example norms from the simultaneous backward, `B_small = 1`.
    PerExample,
    /// `m` accumulation slices; `‖G_small‖²` averages their norms.
    Microbatch { m: usize },
    /// `m` accumulation slices; `‖G_small‖²` is the norm of the running
    /// mean after the first `j`.
    Subbatch { m: usize, j: usize },
}

impl EstimationMode {
    /// Number of accumulation slices a batch is split into.
    pub fn slices(&self) -> usize {
        match *self {
            EstimationMode::PerExample => 1,
            EstimationMode::Microbatch { m } | EstimationMode::Subbatch { m, .. } => m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimationMode::PerExample => Ok(()),
            EstimationMode::Microbatch { m } if m >= 2 => Ok(()),
            EstimationMode::Microbatch { m } => Err(Error::Config(format!(
                "microbatch mode needs m ≥ 2, got {m}"
            ))),
            EstimationMode::Subbatch { m, j } if j >= 1 && j < m => Ok(()),
            EstimationMode::Subbatch { m, j } => Err(Error::Config(format!(
                "subbatch mode needs 1 ≤ j < m, got j={j} m={m}"
            ))),
        }
    }

    /// Checks that a batch of `batch` sequences can be used in this mode.
    pub fn check_batch(&self, batch: usize) -> Result<()> {
        let m = self.slices();
        match self {
            EstimationMode::PerExample if batch < 2 => Err(Error::Config(
                "per-example estimation needs a batch of at least 2".into(),
            )),
            EstimationMode::Microbatch { .. } | EstimationMode::Subbatch { .. }
                if !batch.is_multiple_of(m) =>
            {
                Err(Error::Config(format!(
                    "batch size {batch} is not divisible into {m} slices"
                )))
            }
            _ => Ok(()),
        }
    }
}

fn default_loss_scale() -> f64 {
    1.0
}

fn default_concentration() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub vocab: usize,
    pub model_dim: usize,
    pub hidden_multiplier: usize,
    pub n_blocks: usize,
    pub seq_len: usize,
    pub total_tokens: u64,
    pub optimizer: OptimizerSpec,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_decay: LrDecay,
    pub batch_schedule: ScheduleSpec,
    pub estimation_mode: EstimationMode,
    pub ema_alpha: f64,
    pub seed: u64,
    /// Multiplies the loss (and so every gradient); optimizer updates are
    /// unscaled again before they are applied.
    #[serde(default = "default_loss_scale")]
    pub loss_scale: f64,
    /// Dirichlet concentration of the synthetic transition rows.
    #[serde(default = "default_concentration")]
    pub markov_concentration: f64,
}

impl TrainConfig {
    /// The desk-scale toy task: V=16, D=32, two blocks.
    pub fn toy() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            vocab: 16,
            model_dim: 32,
            hidden_multiplier: 2,
            n_blocks: 2,
            seq_len: 16,
            total_tokens: 2_000_000,
            optimizer: OptimizerSpec::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate: 1e-3,
            lr_decay: LrDecay::Constant,
            batch_schedule: ScheduleSpec::Fixed { batch_size: 64 },
            estimation_mode: EstimationMode::PerExample,
            ema_alpha: 0.05,
            seed: 0,
            loss_scale: 1.0,
            markov_concentration: default_concentration(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hidden(&self) -> usize {
        self.model_dim * self.hidden_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.vocab < 2 {
            return bad("vocab must be at least 2".into());
        }
        if self.model_dim < 2 || self.hidden_multiplier == 0 || self.seq_len == 0 {
            return bad("model_dim ≥ 2, hidden_multiplier ≥ 1 and seq_len ≥ 1 are required".into());
        }
        if self.total_tokens == 0 {
            return bad("total_tokens must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("invalid learning_rate {}", self.learning_rate));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return bad(format!("ema_alpha must be in (0, 1], got {}", self.ema_alpha));
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return bad(format!("loss_scale must be positive, got {}", self.loss_scale));
        }
        if !(self.markov_concentration > 0.0 && self.markov_concentration.is_finite()) {
            return bad("markov_concentration must be positive".into());
        }
        match self.optimizer {
            OptimizerSpec::Sgd => {}
            OptimizerSpec::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps >= 0.0) {
                    return bad("Adam needs β₁, β₂ in [0, 1) and ε ≥ 0".into());
                }
            }
        }
        if let LrDecay::Linear { final_fraction } = self.lr_decay {
            if !(0.0..=1.0).contains(&final_fraction) {
                return bad("lr_decay final_fraction must be in [0, 1]".into());
            }
        }
        match self.batch_schedule {
            ScheduleSpec::Fixed { batch_size: 0 } => {
                return bad("batch_size must be positive".into())
            }
            ScheduleSpec::LinearRamp {
                b_start,
                b_end,
                ramp_tokens,
            } => {
                if b_start == 0 || b_start > b_end {
                    return bad(format!("need 1 ≤ b_start ≤ b_end, got {b_start} and {b_end}"));
                }
                if ramp_tokens > self.total_tokens {
                    return bad("ramp_tokens exceeds total_tokens".into());
                }
            }
            _ => {}
        }
        self.estimation_mode.validate()?;
        self.estimation_mode
            .check_batch(self.batch_schedule.final_batch_size())
    }
}
