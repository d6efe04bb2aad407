//! Restarting a run from a checkpoint with a changed learning rate or
//! batch size.

use super::config::TrainConfig;
use super::run::{Intervention, StepLog, Trainer};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ScenarioBranch {
    pub intervention: Intervention,
    pub logs: Vec<StepLog>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    /// Steps before the checkpoint.
    pub prefix: Vec<StepLog>,
    /// Unmodified continuation from the checkpoint.
    pub baseline: Vec<StepLog>,
    pub branches: Vec<ScenarioBranch>,
}

/// Total number of steps the configured schedule takes to spend the budget.
pub fn planned_steps(config: &TrainConfig) -> usize {
    let mut tokens = 0u64;
    let mut steps = 0;
    while tokens < config.total_tokens {
        tokens += (config.batch_schedule.batch_size_at(tokens) * config.seq_len) as u64;
        steps += 1;
    }
    steps
}

/// Trains to `checkpoint_step`, then continues one clone of the state per
/// intervention (plus an unmodified one) to the end of the token budget.
pub fn temperature_scenario(
    config: TrainConfig,
    checkpoint_step: usize,
    interventions: &[Intervention],
) -> Result<ScenarioOutcome> {
    let total = planned_steps(&config);
    if checkpoint_step >= total {
        return Err(Error::InvalidArgument(format!(
            "checkpoint step {checkpoint_step} is not before the last step ({total} steps)"
        )));
    }
    let mut trainer = Trainer::new(config)?;
    let prefix = trainer.run_until_step(checkpoint_step)?;
    let mut branches = Vec::with_capacity(interventions.len());
    for &intervention in interventions {
        let mut fork = trainer.clone();
        fork.apply(intervention)?;
        branches.push(ScenarioBranch {
            intervention,
            logs: fork.run_to_end()?,
        });
    }
    let baseline = trainer.run_to_end()?;
    Ok(ScenarioOutcome {
        prefix,
        baseline,
        branches,
    })
}
