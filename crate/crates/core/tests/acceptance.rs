//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

mod common;

use std::time::{Duration, Instant};

use common::{
    corrected, count_costs, embedding_oracle, finite_difference_checks, layernorm_oracle,
    linear_oracle, random_tensor,
};
use gnskit::costmodel::{crossover_t, flops, io, CostShape, Criterion, Method};
use gnskit::gns::{estimate_g2, estimate_s, jackknife_ratio_stderr, GradStats, LayerGroup};
use gnskit::layers::{
    linear_perexample_sqnorm_frobenius, EmbeddingLayer, LayerNormLayer, LinearLayer, TokenIds,
};
use gnskit::simulator::{simulate, variance_study, SimConfig};
use gnskit::trainer::logs::{write_layer_csv, write_step_csv};
use gnskit::trainer::tokens::{mean_curve, LOSS_SMOOTHING_ALPHA};
use gnskit::trainer::{
    loss_curve, make_dataset, smooth_loss, tokens_saved, train, EstimationMode, ModelDims,
    ScheduleSpec, StepLog, ToyModel, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: pass flag plus a one-line summary.
type Outcome = (bool, String);

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn c01_per_example_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut track = |got: f64, want: f64| {
        let rel = if got == want { 0.0 } else { (got - want).abs() / want.abs().max(got.abs()) };
        worst = worst.max(rel);
    };
    for _ in 0..100 {
        let (b, t) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
        let (k, l) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let x = random_tensor(&mut rng, &[b, t, k]);
        let g = random_tensor(&mut rng, &[b, t, l]);
        let layer = LinearLayer::new(
            random_tensor(&mut rng, &[k, l]),
            Some(random_tensor(&mut rng, &[l])),
        )
        .unwrap();
        let (out, _) = layer.backward_simultaneous(&x, &g).unwrap();
        for (key, per) in linear_oracle(&x, &g, true) {
            track(out.per_example_sqnorms[key], corrected(&per));
        }
    }
    for _ in 0..100 {
        let (b, t, k) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(2..=6));
        let x = random_tensor(&mut rng, &[b, t, k]);
        let g = random_tensor(&mut rng, &[b, t, k]);
        let layer = LayerNormLayer::new(
            random_tensor(&mut rng, &[k]),
            random_tensor(&mut rng, &[k]),
            1e-5,
        )
        .unwrap();
        let (_, cache) = layer.forward(&x).unwrap();
        let (out, _) = layer.backward_simultaneous(&cache, &g).unwrap();
        for (key, per) in layernorm_oracle(&x, &g, 1e-5) {
            track(out.per_example_sqnorms[key], corrected(&per));
        }
    }
    for _ in 0..100 {
        let (b, t) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
        let (v, d) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let ids = TokenIds::new(b, t, (0..b * t).map(|_| rng.gen_range(0..v)).collect()).unwrap();
        let g = random_tensor(&mut rng, &[b, t, d]);
        let layer = EmbeddingLayer::new(random_tensor(&mut rng, &[v, d])).unwrap();
        let out = layer.backward_simultaneous(&ids, &g).unwrap();
        track(out.per_example_sqnorms["weight"], corrected(&embedding_oracle(&ids, &g, v)));
    }
    let elapsed = start.elapsed();
    (
        worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!("300 cases, worst rel err {worst:.2e} (tol 1e-9), {:.2}s (limit 10s)", secs(elapsed)),
    )
}

fn c02_frobenius_simultaneous_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (b, t) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
        let (k, l) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let x = random_tensor(&mut rng, &[b, t, k]);
        let g = random_tensor(&mut rng, &[b, t, l]);
        let layer = LinearLayer::new(random_tensor(&mut rng, &[k, l]), None).unwrap();
        let (out, _) = layer.backward_simultaneous(&x, &g).unwrap();
        let frob = linear_perexample_sqnorm_frobenius(&x, &g).unwrap();
        for (a, s) in frob.data().iter().zip(&out.raw_per_example["weight"]) {
            if a != s {
                worst = worst.max((a - s).abs() / a.abs().max(s.abs()));
            }
        }
    }
    (
        worst <= 1e-12,
        format!("100 cases, worst rel err {worst:.2e} (tol 1e-12)"),
    )
}

fn c03_estimator_unbiasedness() -> Outcome {
    let start = Instant::now();
    let dim = 16;
    let mut cfg = SimConfig::isotropic(dim, 1.0, 8, 1, 100_000, 303).unwrap();
    cfg.g_true = (0..dim).map(|i| 0.05 * i as f64 - 0.3).collect();
    cfg.sigma_diag = (0..dim).map(|i| 0.02 + 0.01 * i as f64).collect();
    let g2_true: f64 = cfg.g_true.iter().map(|g| g * g).sum();
    let tr_sigma: f64 = cfg.sigma_diag.iter().sum();
    let stats = simulate(&cfg, 0).unwrap();
    let mean_se = |xs: Vec<f64>| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    };
    let (mg, seg) = mean_se(stats.iter().map(|s| estimate_g2(s).unwrap()).collect());
    let (ms, ses) = mean_se(stats.iter().map(|s| estimate_s(s).unwrap()).collect());
    let zg = (mg - g2_true) / seg;
    let zs = (ms - tr_sigma) / ses;
    let elapsed = start.elapsed();
    (
        zg.abs() < 4.0 && zs.abs() < 4.0 && elapsed < Duration::from_secs(30),
        format!(
            "1e5 trials: G2 {mg:.5} vs {g2_true:.5} (z={zg:.2}), S {ms:.5} vs {tr_sigma:.5} (z={zs:.2}), {:.2}s",
            secs(elapsed)
        ),
    )
}

/// Mean jackknife stderr over `seeds` for each `(b_big, b_small)`.
fn mean_stderrs(pairs: &[(usize, usize)], seeds: u64, budget: usize) -> Vec<f64> {
    let mut sums = vec![0.0; pairs.len()];
    for seed in 0..seeds {
        let cfgs: Vec<SimConfig> = pairs
            .iter()
            .map(|&(big, small)| SimConfig::isotropic(100, 1.0, big, small, 0, 4000 + seed).unwrap())
            .collect();
        for (acc, row) in sums.iter_mut().zip(variance_study(&cfgs, budget).unwrap()) {
            *acc += row.stderr;
        }
    }
    sums.iter().map(|s| s / seeds as f64).collect()
}

fn c04_variance_study_shape() -> Outcome {
    let seeds = 20;
    let smalls = [1, 2, 4, 8, 16];
    let pairs: Vec<(usize, usize)> = smalls.iter().map(|&s| (64, s)).collect();
    let by_small = mean_stderrs(&pairs, seeds, 64 * 400);
    let increasing = by_small.windows(2).all(|w| w[0] < w[1]);
    let bigs = [(16, 1), (64, 1), (256, 1)];
    let by_big = mean_stderrs(&bigs, seeds, 256 * 400);
    let (lo, hi) = by_big
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let spread = hi / lo - 1.0;
    (
        increasing && spread <= 0.25,
        format!(
            "{seeds} seeds; stderr by b_small {smalls:?}: {:?}; by b_big 16/64/256: {:?} (spread {:.1}%, limit 25%)",
            by_small.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            by_big.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            100.0 * spread
        ),
    )
}

fn c05_cost_formulas() -> Outcome {
    let mut mismatches = 0;
    let mut shapes = 0;
    for b in 1..=4 {
        for t in 1..=4 {
            for k in 1..=4 {
                for l in 1..=4 {
                    let shape = CostShape::new(b, t, k, l).unwrap();
                    shapes += 1;
                    for method in Method::ALL {
                        let (f, i, _) = count_costs(&shape, method);
                        if f != flops(&shape, method) || i != io(&shape, method) {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    let io_x = crossover_t(1024, 1024, Criterion::Io);
    let fl_x = crossover_t(1024, 1024, Criterion::Flops);
    (
        mismatches == 0 && (io_x - 724.08).abs() <= 0.01 && (fl_x - 22.63).abs() <= 0.01,
        format!(
            "{shapes} shapes x 2 methods, {mismatches} mismatches; crossover IO {io_x:.4}, FLOPs {fl_x:.4}"
        ),
    )
}

fn c06_sequence_length_scaling() -> Outcome {
    let (b, k, l) = (8, 1024, 1024);
    let sim = |t| flops(&CostShape::new(b, t, k, l).unwrap(), Method::Simultaneous).grad_norms;
    let frob = |t| flops(&CostShape::new(b, t, k, l).unwrap(), Method::Frobenius).grad_norms;
    let flat = sim(128) == sim(4096);
    let quad = [1, 7, 128, 2048].iter().all(|&t| frob(2 * t) == 4 * frob(t));
    (
        flat && quad,
        format!(
            "simultaneous T=128 {} vs T=4096 {}; Frobenius 2T/T ratio {}",
            sim(128),
            sim(4096),
            frob(256) as f64 / frob(128) as f64
        ),
    )
}

fn c07_gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let dims = ModelDims {
        vocab: 7,
        model_dim: 6,
        hidden: 12,
        n_blocks: 2,
    };
    let model = ToyModel::new(dims, &mut rng).unwrap();
    let mut data = make_dataset(7, 0.5, 707).unwrap();
    let (x, y) = data.batch(3, 5);
    let checks = finite_difference_checks(&model, &x, &y, 1e-5, 3, &mut rng);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passes(1e-4)).collect();
    let layers: std::collections::BTreeSet<&str> = checks.iter().map(|c| c.layer.as_str()).collect();
    let worst = checks
        .iter()
        .map(|c| (c.analytic - c.numeric).abs() / c.analytic.abs().max(c.numeric.abs()).max(1e-300))
        .fold(0.0f64, f64::max);
    (
        failed.is_empty() && layers.len() == model.layers().len(),
        format!(
            "{} checks over {} layers, {} failures, worst rel err {worst:.2e}",
            checks.len(),
            layers.len(),
            failed.len()
        ),
    )
}

fn c08_worked_arithmetic() -> Outcome {
    let est = GradStats::new(1.25, 1.5, 2, 1, 2).unwrap().estimate().unwrap();
    let jk = jackknife_ratio_stderr(&[(1.0, 1.0), (3.0, 1.0)]).unwrap();
    (
        est.g2 == 1.0 && est.s == 0.5 && est.b_simple == Some(0.5) && jk.stderr == 1.0,
        format!("G2={} S={} B_simple={:?} jackknife stderr={}", est.g2, est.s, est.b_simple, jk.stderr),
    )
}

fn toy(schedule: ScheduleSpec) -> TrainConfig {
    TrainConfig {
        batch_schedule: schedule,
        ..TrainConfig::toy()
    }
}

fn c09_batch_schedule_case_study() -> Outcome {
    let start = Instant::now();
    let fixed = TrainConfig {
        learning_rate: 5e-3,
        ..toy(ScheduleSpec::Fixed { batch_size: 512 })
    };
    let ramp = TrainConfig {
        batch_schedule: ScheduleSpec::LinearRamp {
            b_start: 16,
            b_end: 512,
            ramp_tokens: 1_000_000,
        },
        ..fixed.clone()
    };
    let (mut base_curves, mut cand_curves) = (Vec::new(), Vec::new());
    let mut per_seed = Vec::new();
    for seed in [0u64, 1, 2] {
        let b = loss_curve(&train(TrainConfig { seed, ..fixed.clone() }).unwrap().logs);
        let c = loss_curve(&train(TrainConfig { seed, ..ramp.clone() }).unwrap().logs);
        let saved = tokens_saved(
            &smooth_loss(&b, LOSS_SMOOTHING_ALPHA).unwrap(),
            &smooth_loss(&c, LOSS_SMOOTHING_ALPHA).unwrap(),
        )
        .unwrap();
        per_seed.push(saved.len());
        base_curves.push(b);
        cand_curves.push(c);
    }
    let b = smooth_loss(&mean_curve(&base_curves).unwrap(), LOSS_SMOOTHING_ALPHA).unwrap();
    let c = smooth_loss(&mean_curve(&cand_curves).unwrap(), LOSS_SMOOTHING_ALPHA).unwrap();
    let saved = tokens_saved(&b, &c).unwrap();
    let level = b.last().unwrap().1;
    let reached = b.iter().find(|p| p.1 == level).unwrap().0;
    let at_final = saved.iter().find(|p| p.0 == level).map(|p| p.1);
    let frac = at_final.map(|s| s / reached);
    let elapsed = start.elapsed();
    (
        frac.is_some_and(|f| f >= 0.05)
            && per_seed.iter().all(|&n| n > 0)
            && elapsed < Duration::from_secs(600),
        format!(
            "seed-mean final loss {level:.4} first reached at {reached:.0} tokens; saved {:?} tokens ({:.1}%, bar 5%); series lengths per seed {per_seed:?}; {:.0}s",
            at_final.map(|s| s.round()),
            100.0 * frac.unwrap_or(f64::NAN),
            secs(elapsed)
        ),
    )
}

fn csv_bytes(logs: &[StepLog]) -> (Vec<u8>, Vec<u8>) {
    let (mut steps, mut layers) = (Vec::new(), Vec::new());
    write_step_csv(logs, &mut steps).unwrap();
    write_layer_csv(logs, &mut layers).unwrap();
    (steps, layers)
}

fn c10_mode_equivalence() -> Outcome {
    let base = TrainConfig {
        total_tokens: 16 * 16 * 100,
        seed: 10,
        ..toy(ScheduleSpec::Fixed { batch_size: 16 })
    };
    let a = train(base.clone()).unwrap().logs;
    let b = train(TrainConfig {
        estimation_mode: EstimationMode::Microbatch { m: 16 },
        ..base
    })
    .unwrap()
    .logs;
    let identical = a == b && csv_bytes(&a) == csv_bytes(&b);
    let first_diff = a.iter().zip(&b).position(|(x, y)| x != y);
    (
        identical && a.len() == 100,
        format!("{} steps, first differing step {first_diff:?}", a.len()),
    )
}

fn c11_loss_scale_invariance() -> Outcome {
    let base = TrainConfig {
        total_tokens: 16 * 16 * 100,
        seed: 11,
        ..toy(ScheduleSpec::Fixed { batch_size: 16 })
    };
    let a = train(base.clone()).unwrap().logs;
    let b = train(TrainConfig {
        loss_scale: 7.0,
        ..base
    })
    .unwrap()
    .logs;
    let (mut worst_ratio, mut worst_scale) = (0.0f64, 0.0f64);
    let mut undefined_mismatch = 0;
    let rel = |x: f64, y: f64| if x == y { 0.0 } else { (x - y).abs() / x.abs().max(y.abs()) };
    for (x, y) in a.iter().zip(&b) {
        let mut records = vec![(&x.total, &y.total)];
        for t in gnskit::gns::LayerType::ALL {
            records.push((x.group(LayerGroup::Only(t)), y.group(LayerGroup::Only(t))));
        }
        records.extend(x.layers.iter().zip(&y.layers).map(|((_, p), (_, q))| (p, q)));
        for (p, q) in records {
            worst_scale = worst_scale.max(rel(49.0 * p.g2_raw, q.g2_raw)).max(rel(49.0 * p.s_raw, q.s_raw));
            match (p.gns_ema, q.gns_ema) {
                (Some(u), Some(v)) => worst_ratio = worst_ratio.max(rel(u, v)),
                (None, None) => {}
                _ => undefined_mismatch += 1,
            }
        }
    }
    (
        worst_ratio <= 1e-9 && worst_scale <= 1e-9 && undefined_mismatch == 0,
        format!(
            "{} steps, worst smoothed-ratio rel diff {worst_ratio:.2e}, worst 49x scaling rel diff {worst_scale:.2e} (tol 1e-9)",
            a.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("per-example oracle equivalence", c01_per_example_oracle_equivalence),
        ("Frobenius and simultaneous norms agree", c02_frobenius_simultaneous_agreement),
        ("estimator unbiasedness", c03_estimator_unbiasedness),
        ("variance study: stderr grows with b_small, flat in b_big", c04_variance_study_shape),
        ("cost formulas match counting oracle", c05_cost_formulas),
        ("norm FLOPs vs sequence length", c06_sequence_length_scaling),
        ("finite-difference gradient check", c07_gradient_correctness),
        ("worked estimator arithmetic", c08_worked_arithmetic),
        ("ramped batch reaches fixed-batch final loss with fewer tokens", c09_batch_schedule_case_study),
        ("per-example and microbatch(m=B) logs bit-identical", c10_mode_equivalence),
        ("loss scaling leaves GNS unchanged", c11_loss_scale_invariance),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        let id = format!("c{n:02}");
        if !filter.is_empty() && !filter.iter().any(|f| id.contains(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let (ok, detail) = std::panic::catch_unwind(run)
            .unwrap_or_else(|_| (false, "panicked".to_string()));
        println!("criterion {n:>2} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
