//! Deterministic toy training loop with gradient-noise-scale logging.

mod capture;
pub mod config;
pub mod data;
pub mod logs;
pub mod model;
pub mod optim;
mod run;
mod scenario;
pub mod tokens;

pub use capture::{capture_mode_norms, small_batch};
pub use config::{EstimationMode, LrDecay, OptimizerSpec, ScheduleSpec, TrainConfig};
pub use data::{make_dataset, MarkovChain, MarkovStream};
pub use model::{ModelDims, ToyModel};
pub use run::{loss_curve, train, GnsRecord, Intervention, StepLog, TrainOutcome, Trainer};
pub use scenario::{planned_steps, temperature_scenario, ScenarioBranch, ScenarioOutcome};
pub use tokens::{smooth_loss, tokens_saved};
