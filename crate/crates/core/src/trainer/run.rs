//! The training loop and its per-step logs.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::capture::{small_batch, SliceNorms};
use super::config::{EstimationMode, TrainConfig};
use super::data::{make_dataset, MarkovStream};
use super::model::{sum_in_order, LayerGrads, ModelDims, ToyModel};
use super::optim::Optimizer;
use crate::error::{Error, Result};
use crate::gns::{aggregate, GnsEstimate, GnsSmoother, GradStats, LayerGroup, LayerKey, LayerType};
use crate::tensor::Tensor;

/// Raw and smoothed estimates for one layer or group of layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnsRecord {
    pub stats: GradStats,
    pub g2_raw: f64,
    pub s_raw: f64,
    /// Ratio of the EMA-smoothed `𝒮` and `𝒢²`; `None` while undefined.
    pub gns_ema: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Tokens processed including this step.
    pub tokens: u64,
    pub batch_size: usize,
    /// Mean token cross-entropy of the step's batch (before loss scaling).
    pub loss: f64,
    pub learning_rate: f64,
    pub layers: Vec<(LayerKey, GnsRecord)>,
    pub total: GnsRecord,
    pub by_type: BTreeMap<LayerType, GnsRecord>,
}

impl StepLog {
    pub fn group(&self, group: LayerGroup) -> &GnsRecord {
        match group {
            LayerGroup::All => &self.total,
            LayerGroup::Only(t) => &self.by_type[&t],
        }
    }
}

/// A change applied to a running trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Intervention {
    /// Multiply the learning rate by `c`.
    ScaleLr(f64),
    /// Multiply every subsequent batch size by `c`.
    ScaleBatch(f64),
}

impl Intervention {
    pub fn factor(&self) -> f64 {
        match *self {
            Intervention::ScaleLr(c) | Intervention::ScaleBatch(c) => c,
        }
    }
}

#[derive(Debug, Clone)]
struct Smoothers {
    layers: Vec<GnsSmoother>,
    total: GnsSmoother,
    by_type: BTreeMap<LayerType, GnsSmoother>,
}

/// Full training state; cloning it forks the run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: ToyModel,
    optimizer: Optimizer,
    data: MarkovStream,
    smoothers: Smoothers,
    step: usize,
    tokens: u64,
    lr_factor: f64,
    batch_factor: f64,
}

/// Logs of a finished run and its final model.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub model: ToyModel,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = make_dataset(config.vocab, config.markov_concentration, config.seed)?;
        let mut model_rng = ChaCha8Rng::seed_from_u64(config.seed);
        model_rng.set_stream(2);
        let dims = ModelDims {
            vocab: config.vocab,
            model_dim: config.model_dim,
            hidden: config.hidden(),
            n_blocks: config.n_blocks,
        };
        let model = ToyModel::new(dims, &mut model_rng)?;
        let smoother = GnsSmoother::new(config.ema_alpha)?;
        let smoothers = Smoothers {
            layers: vec![smoother; model.layers().len()],
            total: smoother,
            by_type: LayerType::ALL.iter().map(|&t| (t, smoother)).collect(),
        };
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer),
            config,
            model,
            data,
            smoothers,
            step: 0,
            tokens: 0,
            lr_factor: 1.0,
            batch_factor: 1.0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn is_done(&self) -> bool {
        self.tokens >= self.config.total_tokens
    }

    /// Batch size of the next step.
    pub fn current_batch_size(&self) -> Result<usize> {
        let base = self.config.batch_schedule.batch_size_at(self.tokens);
        let scaled = base as f64 * self.batch_factor;
        let b = scaled.round();
        if (scaled - b).abs() > 1e-9 || b < 1.0 {
            return Err(Error::Config(format!(
                "batch size {base} scaled by {} is not a whole number of sequences",
                self.batch_factor
            )));
        }
        let b = b as usize;
        self.config.estimation_mode.check_batch(b)?;
        Ok(b)
    }

    pub fn apply(&mut self, intervention: Intervention) -> Result<()> {
        let c = intervention.factor();
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "intervention factor must be positive, got {c}"
            )));
        }
        match intervention {
            Intervention::ScaleLr(c) => self.lr_factor *= c,
            Intervention::ScaleBatch(c) => {
                let old = self.batch_factor;
                self.batch_factor *= c;
                if let Err(e) = self.current_batch_size() {
                    self.batch_factor = old;
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    /// Runs one optimizer step and returns its log.
    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = &self.config;
        let b = self.current_batch_size()?;
        let seq = cfg.seq_len;
        let mode = cfg.estimation_mode;
        let grad_scale = cfg.loss_scale / (b * seq) as f64;
        let (x, y) = self.data.batch(b, seq);

        let (grads, layer_stats, example_loss) = match mode {
            EstimationMode::PerExample => {
                let cache = self.model.forward(&x, &y)?;
                let grads = self.model.backward(&cache, &y, grad_scale, true)?;
                let stats = grads
                    .iter()
                    .map(|lg| per_example_stats(lg, b))
                    .collect::<Result<Vec<_>>>()?;
                (grads, stats, cache.example_loss)
            }
            EstimationMode::Microbatch { m } | EstimationMode::Subbatch { m, .. } => {
                let size = b / m;
                let mut slices: Vec<Vec<LayerGrads>> = Vec::with_capacity(m);
                let mut example_loss = Vec::with_capacity(b);
                for j in 0..m {
                    let xs = x.slice(j * size..(j + 1) * size);
                    let ys = y.slice(j * size..(j + 1) * size);
                    let cache = self.model.forward(&xs, &ys)?;
                    slices.push(self.model.backward(&cache, &ys, grad_scale, false)?);
                    example_loss.extend_from_slice(&cache.example_loss);
                }
                let (grads, stats) = combine_slices(&slices, mode, b)?;
                (grads, stats, example_loss)
            }
        };

        let loss = sum_in_order(&example_loss) / (b * seq) as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss,
            });
        }
        let lr = cfg.learning_rate
            * self.lr_factor
            * cfg.lr_decay.factor(self.tokens, cfg.total_tokens);
        let unscale = 1.0 / cfg.loss_scale;
        self.optimizer.step(&mut self.model, &grads, lr, unscale)?;

        self.tokens += (b * seq) as u64;
        let log = self.record(b, loss, lr, &grads, layer_stats)?;
        self.step += 1;
        Ok(log)
    }

    fn record(
        &mut self,
        batch_size: usize,
        loss: f64,
        learning_rate: f64,
        grads: &[LayerGrads],
        layer_stats: Vec<GradStats>,
    ) -> Result<StepLog> {
        let mut layers = Vec::with_capacity(grads.len());
        for ((lg, stats), smoother) in grads.iter().zip(&layer_stats).zip(&mut self.smoothers.layers) {
            layers.push((lg.key.clone(), make_record(*stats, smoother)?));
        }
        let keyed: Vec<(&LayerKey, &GradStats)> =
            grads.iter().map(|lg| &lg.key).zip(&layer_stats).collect();
        let total = make_record(
            aggregate(keyed.iter().copied(), LayerGroup::All)?,
            &mut self.smoothers.total,
        )?;
        let mut by_type = BTreeMap::new();
        for (&t, smoother) in self.smoothers.by_type.iter_mut() {
            let stats = aggregate(keyed.iter().copied(), LayerGroup::Only(t))?;
            by_type.insert(t, make_record(stats, smoother)?);
        }
        Ok(StepLog {
            step: self.step,
            tokens: self.tokens,
            batch_size,
            loss,
            learning_rate,
            layers,
            total,
            by_type,
        })
    }

    pub fn run_to_end(&mut self) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while !self.is_done() {
            logs.push(self.step()?);
        }
        Ok(logs)
    }

    /// Runs until `steps` steps have been taken in total (or the budget ends).
    pub fn run_until_step(&mut self, steps: usize) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < steps && !self.is_done() {
            logs.push(self.step()?);
        }
        Ok(logs)
    }
}

fn make_record(stats: GradStats, smoother: &mut GnsSmoother) -> Result<GnsRecord> {
    let raw: GnsEstimate = stats.estimate()?;
    let smoothed = smoother.push(&raw);
    Ok(GnsRecord {
        stats,
        g2_raw: raw.g2,
        s_raw: raw.s,
        gns_ema: smoothed.b_simple,
    })
}

/// Layer `GradStats` from simultaneous-backward norms. Keys are summed in
/// name order.
fn per_example_stats(lg: &LayerGrads, batch: usize) -> Result<GradStats> {
    let norms = lg
        .per_example_sqnorms
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("per-example norms missing".into()))?;
    let (mut big, mut small) = (0.0, 0.0);
    for (name, g) in &lg.grads {
        big += g.sqnorm();
        small += norms[name];
    }
    let (b_small, n_small) = small_batch(EstimationMode::PerExample, batch);
    GradStats::new(big, small, batch, b_small, n_small)
}

/// Sums slice gradients in slice order and derives each layer's
/// `GradStats`, keys summed in name order.
fn combine_slices(
    slices: &[Vec<LayerGrads>],
    mode: EstimationMode,
    batch: usize,
) -> Result<(Vec<LayerGrads>, Vec<GradStats>)> {
    let n_layers = slices[0].len();
    let (b_small, n_small) = small_batch(mode, batch);
    let mut grads = Vec::with_capacity(n_layers);
    let mut stats = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let first = &slices[0][li];
        let mut combined = first.clone();
        let (mut big, mut small) = (0.0, 0.0);
        for (name, t) in combined.grads.iter_mut() {
            let parts: Vec<&[f64]> = slices.iter().map(|s| s[li].grads[name].data()).collect();
            let norms = SliceNorms::from_contributions(&parts);
            big += norms.big;
            small += norms.small_sqnorm(mode);
            *t = Tensor::new(t.shape().to_vec(), norms.total)?;
        }
        grads.push(combined);
        stats.push(GradStats::new(big, small, batch, b_small, n_small)?);
    }
    Ok((grads, stats))
}

/// Trains a fresh model over the whole token budget.
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    let logs = trainer.run_to_end()?;
    Ok(TrainOutcome {
        logs,
        model: trainer.model,
    })
}

/// `(tokens, loss)` pairs of a run.
pub fn loss_curve(logs: &[StepLog]) -> Vec<(f64, f64)> {
    logs.iter().map(|l| (l.tokens as f64, l.loss)).collect()
}
