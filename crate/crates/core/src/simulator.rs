//! Monte-Carlo study of estimator variance under a Gaussian gradient model.
//!
//! Per-example gradients are `G + ε`, `ε ~ 𝒩(0, diag(Σ))`. Random numbers
//! come from ChaCha8 seeded with `seed` on stream `stream`, and normals are
//! drawn with `rand_distr::StandardNormal` (ziggurat), so a given
//! `(seed, stream)` reproduces the same table on every platform.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gns::{estimate_g2, estimate_s, jackknife_ratio_stderr, GradStats};

/// Generator used by every simulation: ChaCha8 keyed by `seed`, with an
/// independent stream per configuration.
pub fn sim_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dim: usize,
    /// True gradient `G`.
    pub g_true: Vec<f64>,
    /// Diagonal of the per-example covariance `Σ`.
    pub sigma_diag: Vec<f64>,
    pub b_big: usize,
    pub b_small: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl SimConfig {
    /// `G = (1/√dim)·1` so `‖G‖² = 1`, and `Σ = (gns/dim)·I` so that
    /// `tr(Σ)/‖G‖² = gns`.
    pub fn isotropic(
        dim: usize,
        gns: f64,
        b_big: usize,
        b_small: usize,
        n_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dim must be positive".into()));
        }
        let cfg = Self {
            dim,
            g_true: vec![1.0 / (dim as f64).sqrt(); dim],
            sigma_diag: vec![gns / dim as f64; dim],
            b_big,
            b_small,
            n_steps,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.g_true.len() != self.dim || self.sigma_diag.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "g_true ({}) and sigma_diag ({}) must both have dim {} > 0",
                self.g_true.len(),
                self.sigma_diag.len(),
                self.dim
            )));
        }
        if self.sigma_diag.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "sigma_diag must be finite and non-negative".into(),
            ));
        }
        if self.b_small < 1 || self.b_big <= self.b_small {
            return Err(Error::InvalidArgument(format!(
                "need b_big > b_small ≥ 1, got {} and {}",
                self.b_big, self.b_small
            )));
        }
        if !self.b_big.is_multiple_of(self.b_small) {
            return Err(Error::InvalidArgument(format!(
                "b_small ({}) must divide b_big ({})",
                self.b_small, self.b_big
            )));
        }
        Ok(())
    }

    /// `tr(Σ)/‖G‖²`, or `None` for a zero true gradient.
    pub fn target_gns(&self) -> Option<f64> {
        let g2: f64 = self.g_true.iter().map(|g| g * g).sum();
        (g2 > 0.0).then(|| self.sigma_diag.iter().sum::<f64>() / g2)
    }
}

/// Draws one step: `B_big` per-example gradients split into consecutive
/// sub-batches of `B_small`. Means are formed as `G + mean(ε)` so a
/// noise-free configuration yields `𝒮 = 0` exactly.
pub fn simulate_step<R: rand::Rng>(cfg: &SimConfig, rng: &mut R) -> Result<GradStats> {
    cfg.validate()?;
    let dim = cfg.dim;
    let std: Vec<f64> = cfg.sigma_diag.iter().map(|v| v.sqrt()).collect();
    let n_blocks = cfg.b_big / cfg.b_small;
    let mut big = vec![0.0; dim];
    let mut block = vec![0.0; dim];
    let mut small_sum = 0.0;
    let inv_small = 1.0 / cfg.b_small as f64;
    for _ in 0..n_blocks {
        block.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..cfg.b_small {
            for (acc, &sd) in block.iter_mut().zip(&std) {
                let z: f64 = StandardNormal.sample(rng);
                *acc += sd * z;
            }
        }
        let mut sq = 0.0;
        for ((&e, &g), b) in block.iter().zip(&cfg.g_true).zip(big.iter_mut()) {
            let m = g + e * inv_small;
            sq += m * m;
            *b += e;
        }
        small_sum += sq;
    }
    let inv_big = 1.0 / cfg.b_big as f64;
    let big_sq = big
        .iter()
        .zip(&cfg.g_true)
        .fold(0.0, |acc, (&e, &g)| {
            let m = g + e * inv_big;
            acc + m * m
        });
    GradStats::new(
        big_sq,
        small_sum / n_blocks as f64,
        cfg.b_big,
        cfg.b_small,
        n_blocks,
    )
}

/// `n_steps` consecutive draws on the configuration's own stream.
pub fn simulate(cfg: &SimConfig, stream: u64) -> Result<Vec<GradStats>> {
    let mut rng = sim_rng(cfg.seed, stream);
    (0..cfg.n_steps).map(|_| simulate_step(cfg, &mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StudyRow {
    pub b_big: usize,
    pub b_small: usize,
    pub trials: usize,
    pub gns_hat: f64,
    pub stderr: f64,
    pub seed: u64,
}

/// Runs every configuration for the same number of per-example draws
/// (`samples_budget / b_big` steps each) and reports the jackknife error
/// of the ratio-of-means GNS estimate. Configuration `i` uses stream `i`.
pub fn variance_study(cfgs: &[SimConfig], samples_budget: usize) -> Result<Vec<StudyRow>> {
    cfgs.iter()
        .enumerate()
        .map(|(i, cfg)| {
            let steps = samples_budget / cfg.b_big;
            if steps < 2 {
                return Err(Error::InvalidArgument(format!(
                    "budget {samples_budget} gives fewer than two steps at b_big={}",
                    cfg.b_big
                )));
            }
            let cfg = SimConfig {
                n_steps: steps,
                ..cfg.clone()
            };
            let pairs = simulate(&cfg, i as u64)?
                .iter()
                .map(|s| Ok((estimate_s(s)?, estimate_g2(s)?)))
                .collect::<Result<Vec<_>>>()?;
            let jk = jackknife_ratio_stderr(&pairs)?;
            Ok(StudyRow {
                b_big: cfg.b_big,
                b_small: cfg.b_small,
                trials: steps,
                gns_hat: jk.ratio,
                stderr: jk.stderr,
                seed: cfg.seed,
            })
        })
        .collect()
}

/// CSV with header `b_big,b_small,trials,gns_hat,stderr,seed`.
pub fn write_study_csv<W: Write>(rows: &[StudyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_gives_zero_s() {
        let mut cfg = SimConfig::isotropic(7, 0.0, 12, 3, 20, 5).unwrap();
        cfg.g_true = (0..7).map(|i| 0.1 * i as f64 - 0.3).collect();
        for stats in simulate(&cfg, 0).unwrap() {
            assert_eq!(estimate_s(&stats).unwrap(), 0.0);
        }
        let rows = variance_study(&[cfg], 12 * 50).unwrap();
        assert_eq!(rows[0].stderr, 0.0);
    }

    #[test]
    fn estimators_unbiased_on_scalar_model() {
        let cfg = SimConfig {
            dim: 1,
            g_true: vec![1.0],
            sigma_diag: vec![1.0],
            b_big: 2,
            b_small: 1,
            n_steps: 100_000,
            seed: 3,
        };
        let stats = simulate(&cfg, 0).unwrap();
        let n = stats.len() as f64;
        for (f, target) in [
            (estimate_g2 as fn(&GradStats) -> Result<f64>, 1.0),
            (estimate_s, 1.0),
        ] {
            let xs: Vec<f64> = stats.iter().map(|s| f(s).unwrap()).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!((mean - target).abs() < 4.0 * se, "mean {mean} se {se}");
        }
    }

    #[test]
    fn long_run_gns_matches_target() {
        let cfg = SimConfig::isotropic(100, 1.0, 16, 1, 20_000, 9).unwrap();
        let rows = variance_study(&[cfg], 16 * 20_000).unwrap();
        assert!((rows[0].gns_hat - 1.0).abs() < 0.05, "{:?}", rows[0]);
    }

    #[test]
    fn deterministic() {
        let cfg = SimConfig::isotropic(10, 2.0, 8, 2, 0, 77).unwrap();
        let a = variance_study(&[cfg.clone(), cfg.clone()], 800).unwrap();
        let b = variance_study(&[cfg.clone(), cfg], 800).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1], "distinct streams per configuration");
    }

    #[test]
    fn validation() {
        assert!(SimConfig::isotropic(4, 1.0, 8, 3, 1, 0).is_err());
        assert!(SimConfig::isotropic(4, 1.0, 4, 4, 1, 0).is_err());
        assert!(SimConfig::isotropic(4, -1.0, 8, 2, 1, 0).is_err());
        let cfg = SimConfig::isotropic(4, 1.0, 8, 2, 1, 0).unwrap();
        assert!(variance_study(&[cfg], 8).is_err());
    }

    #[test]
    fn csv_header() {
        let row = StudyRow {
            b_big: 64,
            b_small: 1,
            trials: 10,
            gns_hat: 1.5,
            stderr: 0.25,
            seed: 21,
        };
        let mut buf = Vec::new();
        write_study_csv(&[row], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "b_big,b_small,trials,gns_hat,stderr,seed\n64,1,10,1.5,0.25,21\n"
        );
    }
}
