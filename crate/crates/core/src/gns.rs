//! Unbiased gradient-noise-scale estimators, EMA smoothing, aggregation
//! across layers, jackknife errors and the layer-type regression.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this magnitude `𝒢²` is treated as zero and the ratio is undefined.
pub const G2_GUARD: f64 = 1e-12;

/// One step's norm measurements feeding the estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradStats {
    /// `‖G_big‖²`
    pub g_big_sqnorm: f64,
    /// Mean of `‖G_small‖²` over `n_small` samples.
    pub g_small_sqnorm_mean: f64,
    pub b_big: usize,
    pub b_small: usize,
    pub n_small: usize,
}

impl GradStats {
    pub fn new(
        g_big_sqnorm: f64,
        g_small_sqnorm_mean: f64,
        b_big: usize,
        b_small: usize,
        n_small: usize,
    ) -> Result<Self> {
        let stats = Self {
            g_big_sqnorm,
            g_small_sqnorm_mean,
            b_big,
            b_small,
            n_small,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_small < 1 || self.b_big <= self.b_small {
            return Err(Error::InvalidArgument(format!(
                "need b_big > b_small ≥ 1, got b_big={} b_small={}",
                self.b_big, self.b_small
            )));
        }
        if self.n_small < 1 {
            return Err(Error::InvalidArgument("n_small must be at least 1".into()));
        }
        Ok(())
    }

    /// Both estimators at once.
    pub fn estimate(&self) -> Result<GnsEstimate> {
        Ok(GnsEstimate::from_parts(estimate_g2(self)?, estimate_s(self)?))
    }
}

fn check_batches(stats: &GradStats) -> Result<(f64, f64)> {
    if stats.b_big == stats.b_small {
        return Err(Error::ZeroDenominator(format!(
            "b_big equals b_small ({})",
            stats.b_big
        )));
    }
    stats.validate()?;
    Ok((stats.b_big as f64, stats.b_small as f64))
}

/// `𝒢² = (B_big‖G_big‖² − B_small‖G_small‖²)/(B_big − B_small)`.
pub fn estimate_g2(stats: &GradStats) -> Result<f64> {
    let (big, small) = check_batches(stats)?;
    Ok((big * stats.g_big_sqnorm - small * stats.g_small_sqnorm_mean) / (big - small))
}

/// `𝒮 = (‖G_small‖² − ‖G_big‖²)/(1/B_small − 1/B_big)`.
pub fn estimate_s(stats: &GradStats) -> Result<f64> {
    let (big, small) = check_batches(stats)?;
    Ok((stats.g_small_sqnorm_mean - stats.g_big_sqnorm) / (1.0 / small - 1.0 / big))
}

/// `(𝒢², 𝒮, ℬ_simple)`. `b_simple` is `None` when `|𝒢²| < G2_GUARD`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnsEstimate {
    pub g2: f64,
    pub s: f64,
    pub b_simple: Option<f64>,
}

impl GnsEstimate {
    pub fn from_parts(g2: f64, s: f64) -> Self {
        Self {
            g2,
            s,
            b_simple: ratio(s, g2),
        }
    }
}

fn ratio(s: f64, g2: f64) -> Option<f64> {
    (g2.abs() >= G2_GUARD && g2.is_finite() && s.is_finite()).then(|| s / g2)
}

/// Exponential moving average; `alpha` weights the newest sample and the
/// first sample initializes the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub alpha: f64,
    pub value: f64,
    pub count: usize,
}

impl EmaState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "EMA alpha must lie in (0, 1], got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            value: 0.0,
            count: 0,
        })
    }

    pub fn update(self, x: f64) -> Result<Self> {
        ema_update(self, x)
    }

    pub fn push(&mut self, x: f64) {
        *self = ema_update(*self, x).expect("alpha validated at construction");
    }
}

pub fn ema_update(state: EmaState, x: f64) -> Result<EmaState> {
    if !(state.alpha > 0.0 && state.alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "EMA alpha must lie in (0, 1], got {}",
            state.alpha
        )));
    }
    let value = if state.count == 0 || state.alpha == 1.0 {
        x
    } else {
        (1.0 - state.alpha) * state.value + state.alpha * x
    };
    Ok(EmaState {
        value,
        count: state.count + 1,
        ..state
    })
}

/// Ratio of smoothed `𝒮` to smoothed `𝒢²`. Returns `b_simple = None` if
/// either series is empty or the smoothed `𝒢²` is within the guard.
pub fn smoothed_gns(g2_ema: &EmaState, s_ema: &EmaState) -> GnsEstimate {
    if g2_ema.count == 0 || s_ema.count == 0 {
        return GnsEstimate {
            g2: g2_ema.value,
            s: s_ema.value,
            b_simple: None,
        };
    }
    GnsEstimate::from_parts(g2_ema.value, s_ema.value)
}

/// Smoothing pair for one `(𝒢², 𝒮)` series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnsSmoother {
    pub g2: EmaState,
    pub s: EmaState,
}

impl GnsSmoother {
    pub fn new(alpha: f64) -> Result<Self> {
        Ok(Self {
            g2: EmaState::new(alpha)?,
            s: EmaState::new(alpha)?,
        })
    }

    pub fn push(&mut self, estimate: &GnsEstimate) -> GnsEstimate {
        self.g2.push(estimate.g2);
        self.s.push(estimate.s);
        smoothed_gns(&self.g2, &self.s)
    }
}

/// Layer types carrying per-example gradient norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerType {
    Embedding,
    Linear,
    LayerNorm,
}

impl LayerType {
    pub const ALL: [LayerType; 3] = [LayerType::Embedding, LayerType::Linear, LayerType::LayerNorm];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerType::Embedding => "embedding",
            LayerType::Linear => "linear",
            LayerType::LayerNorm => "layernorm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for LayerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerKey {
    pub name: String,
    pub layer_type: LayerType,
}

impl LayerKey {
    pub fn new(name: impl Into<String>, layer_type: LayerType) -> Self {
        Self {
            name: name.into(),
            layer_type,
        }
    }
}

/// Which layers an aggregate covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerGroup {
    All,
    Only(LayerType),
}

impl LayerGroup {
    pub fn contains(self, t: LayerType) -> bool {
        match self {
            LayerGroup::All => true,
            LayerGroup::Only(only) => only == t,
        }
    }
}

/// Sums squared norms over the selected layers. Squared norms over a union
/// of parameters add, so the result is the `GradStats` of the union.
pub fn aggregate<'a, I>(stats_by_layer: I, group: LayerGroup) -> Result<GradStats>
where
    I: IntoIterator<Item = (&'a LayerKey, &'a GradStats)>,
{
    let mut acc: Option<GradStats> = None;
    for (key, stats) in stats_by_layer {
        if !group.contains(key.layer_type) {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(*stats),
            Some(a) => {
                if a.b_big != stats.b_big || a.b_small != stats.b_small || a.n_small != stats.n_small
                {
                    return Err(Error::MixedBatchSizes(format!(
                        "layer {} has (b_big={}, b_small={}, n_small={}) but earlier layers have ({}, {}, {})",
                        key.name, stats.b_big, stats.b_small, stats.n_small, a.b_big, a.b_small, a.n_small
                    )));
                }
                a.g_big_sqnorm += stats.g_big_sqnorm;
                a.g_small_sqnorm_mean += stats.g_small_sqnorm_mean;
            }
        }
    }
    acc.ok_or_else(|| Error::InvalidArgument(format!("no layers selected by {group:?}")))
}

/// Convenience wrapper over a `BTreeMap`.
pub fn aggregate_map(stats: &BTreeMap<LayerKey, GradStats>, group: LayerGroup) -> Result<GradStats> {
    aggregate(stats.iter(), group)
}

/// Jackknife estimate for the ratio of means `R = mean(s)/mean(g)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JackknifeRatio {
    pub ratio: f64,
    pub stderr: f64,
}

/// Leave-one-out standard error of `mean(s)/mean(g)` over `(s_i, g_i)` pairs.
pub fn jackknife_ratio_stderr(pairs: &[(f64, f64)]) -> Result<JackknifeRatio> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "jackknife needs at least 2 pairs, got {n}"
        )));
    }
    let (sum_s, sum_g) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), &(s, g)| (a + s, b + g));
    if sum_g == 0.0 {
        return Err(Error::ZeroDenominator("mean of g is zero".into()));
    }
    let nf = n as f64;
    let ratio = (sum_s / nf) / (sum_g / nf);
    let mut loo = Vec::with_capacity(n);
    for &(s, g) in pairs {
        let denom = sum_g - g;
        if denom == 0.0 {
            return Err(Error::ZeroDenominator(
                "a leave-one-out mean of g is zero".into(),
            ));
        }
        loo.push((sum_s - s) / denom);
    }
    // Equal leave-one-out ratios have zero spread; don't let the rounding
    // of their mean leak in.
    if loo.iter().all(|r| *r == loo[0]) {
        return Ok(JackknifeRatio { ratio, stderr: 0.0 });
    }
    let mean_loo = loo.iter().sum::<f64>() / nf;
    let ss: f64 = loo.iter().map(|r| (r - mean_loo) * (r - mean_loo)).sum();
    let stderr = ((nf - 1.0) / nf * ss).sqrt();
    Ok(JackknifeRatio { ratio, stderr })
}

/// Raw `(𝒢², 𝒮)` series for one group of layers, aligned by step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComponentSeries {
    pub g2: Vec<f64>,
    pub s: Vec<f64>,
}

impl ComponentSeries {
    pub fn push(&mut self, g2: f64, s: f64) {
        self.g2.push(g2);
        self.s.push(s);
    }

    pub fn len(&self) -> usize {
        self.g2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g2.is_empty()
    }

    /// EMA-smoothed `ℬ_simple` at every step.
    pub fn smoothed(&self, alpha: f64) -> Result<Vec<Option<f64>>> {
        let mut smoother = GnsSmoother::new(alpha)?;
        Ok(self
            .g2
            .iter()
            .zip(&self.s)
            .map(|(&g2, &s)| smoother.push(&GnsEstimate::from_parts(g2, s)).b_simple)
            .collect())
    }
}

/// Least-squares fit `y = slope·x + intercept` with Pearson's r.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regression {
    /// `None` when `x` has zero variance.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// `None` when either series has zero variance.
    pub pearson_r: Option<f64>,
    pub n: usize,
}

pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<Regression> {
    if x.len() != y.len() {
        return Err(Error::Shape("regression series differ in length".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "regression needs at least 3 aligned points, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let slope = (sxx > 0.0).then(|| sxy / sxx);
    let pearson_r = (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt());
    Ok(Regression {
        slope,
        intercept: slope.map(|m| my - m * mx),
        pearson_r,
        n,
    })
}

/// One row of the layer-type regression table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerRegression {
    pub layer_type: LayerType,
    pub alpha: f64,
    pub fit: Regression,
}

/// Regresses smoothed total GNS on each layer type's smoothed GNS for
/// every EMA alpha. Steps where either ratio is undefined are dropped.
pub fn regress_layer_gns(
    total: &ComponentSeries,
    per_type: &BTreeMap<LayerType, ComponentSeries>,
    alphas: &[f64],
) -> Result<Vec<LayerRegression>> {
    let mut rows = Vec::new();
    for &alpha in alphas {
        let total_gns = total.smoothed(alpha)?;
        for (&layer_type, series) in per_type {
            if series.len() != total.len() {
                return Err(Error::Shape(format!(
                    "{layer_type} series has {} steps but total has {}",
                    series.len(),
                    total.len()
                )));
            }
            let type_gns = series.smoothed(alpha)?;
            let (xs, ys): (Vec<f64>, Vec<f64>) = type_gns
                .iter()
                .zip(&total_gns)
                .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
                .unzip();
            rows.push(LayerRegression {
                layer_type,
                alpha,
                fit: linear_regression(&xs, &ys)?,
            });
        }
    }
    Ok(rows)
}
