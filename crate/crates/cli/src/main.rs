use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use gnskit::costmodel::{self, CostShape, Criterion, DimRange, Method};
use gnskit::gns::regress_layer_gns;
use gnskit::simulator::{variance_study, write_study_csv, SimConfig};
use gnskit::trainer::logs::{component_series, read_layer_log, write_layer_csv, write_step_csv};
use gnskit::trainer::tokens::{mean_curve, LOSS_SMOOTHING_ALPHA};
use gnskit::trainer::{
    loss_curve, smooth_loss, tokens_saved, train, ScheduleSpec, StepLog, TrainConfig,
};

#[derive(Parser)]
#[command(name = "gnskit", version, about = "Gradient noise scale experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimator standard error versus small batch size at equal sample budget.
    Simulate {
        #[arg(long, value_delimiter = ',', required = true)]
        b_big: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        b_small: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        gns_target: f64,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        dim: u64,
        /// Steps at the largest b_big; every configuration gets the same
        /// number of per-example samples.
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        trials: u64,
        #[arg(long, value_delimiter = ',', required = true)]
        seed: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// FLOP and I/O cost sweep of the two per-example norm methods.
    Cost {
        #[arg(long, default_value = "1")]
        b: DimRange,
        #[arg(long)]
        t: DimRange,
        #[arg(long)]
        k: DimRange,
        #[arg(long)]
        l: DimRange,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model and write its step and layer logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a candidate batch schedule against a fixed-batch baseline.
    ScheduleCompare {
        /// Candidate configuration.
        #[arg(long)]
        config: PathBuf,
        /// Baseline configuration; defaults to the candidate with a fixed
        /// batch at its final size.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regress total GNS on each layer type's GNS from a layer log.
    Analyze {
        /// Layer log CSV, or a directory containing `layers.csv`.
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<gnskit::Error> for Failure {
    fn from(e: gnskit::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate {
            b_big,
            b_small,
            gns_target,
            dim,
            trials,
            seed,
            out,
        } => run_simulate(&b_big, &b_small, gns_target, dim as usize, trials as usize, &seed, &out),
        Command::Cost { b, t, k, l, out } => run_cost(&b, &t, &k, &l, &out),
        Command::Train { config, seed, out } => run_train(&config, seed, &out),
        Command::ScheduleCompare {
            config,
            baseline,
            seeds,
            out,
        } => run_schedule_compare(&config, baseline.as_deref(), &seeds, &out),
        Command::Analyze { logs, alphas, out } => run_analyze(&logs, &alphas, &out),
    }
}

fn out_dir(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
        .map_err(Failure::Runtime)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn run_simulate(
    b_big: &[usize],
    b_small: &[usize],
    gns: f64,
    dim: usize,
    trials: usize,
    seeds: &[u64],
    out: &Path,
) -> Result<(), Failure> {
    if !(gns >= 0.0 && gns.is_finite()) {
        return Err(usage(anyhow!("--gns-target must be finite and non-negative")));
    }
    let budget = trials * b_big.iter().max().copied().unwrap_or(0);
    let mut cfgs = Vec::new();
    for &seed in seeds {
        for &big in b_big {
            for &small in b_small {
                cfgs.push(SimConfig::isotropic(dim, gns, big, small, 0, seed).map_err(usage)?);
            }
        }
    }
    out_dir(out)?;
    let mut rows = Vec::with_capacity(cfgs.len());
    for seed in seeds {
        let group: Vec<SimConfig> = cfgs.iter().filter(|c| c.seed == *seed).cloned().collect();
        rows.extend(variance_study(&group, budget).map_err(usage)?);
    }
    let path = out.join("variance_study.csv");
    write_study_csv(&rows, create(&path)?).context("writing study")?;
    for r in &rows {
        println!(
            "b_big={} b_small={} seed={} trials={} gns_hat={:.6} stderr={:.6}",
            r.b_big, r.b_small, r.seed, r.trials, r.gns_hat, r.stderr
        );
    }
    Ok(())
}

fn run_cost(b: &DimRange, t: &DimRange, k: &DimRange, l: &DimRange, out: &Path) -> Result<(), Failure> {
    let rows = costmodel::sweep(b, t, k, l).map_err(usage)?;
    out_dir(out)?;
    costmodel::write_sweep_csv(&rows, create(&out.join("cost_sweep.csv"))?)
        .context("writing sweep")?;
    for &kv in k.values() {
        for &lv in l.values() {
            println!(
                "K={kv} L={lv} crossover_t io={:.2} flops={:.2}",
                costmodel::crossover_t(kv, lv, Criterion::Io),
                costmodel::crossover_t(kv, lv, Criterion::Flops)
            );
        }
    }
    if [b, t, k, l].iter().all(|r| r.values().len() == 1) {
        let shape = CostShape::new(b.values()[0], t.values()[0], k.values()[0], l.values()[0])
            .map_err(usage)?;
        for method in Method::ALL {
            let f = costmodel::flops(&shape, method);
            let i = costmodel::io(&shape, method);
            println!(
                "{method}: flops_wg={} flops_norms={} io_wg={} io_norms={}",
                f.weight_grad, f.grad_norms, i.weight_grad, i.grad_norms
            );
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Usage)?;
    TrainConfig::from_json(&text)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(Failure::Usage)
}

fn train_logs(config: TrainConfig) -> Result<Vec<StepLog>, Failure> {
    let seed = config.seed;
    Ok(train(config)
        .with_context(|| format!("training with seed {seed}"))?
        .logs)
}

fn run_train(config: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    cfg.seed = seed;
    let logs = train_logs(cfg)?;
    out_dir(out)?;
    write_step_csv(&logs, create(&out.join("steps.csv"))?).context("writing step log")?;
    write_layer_csv(&logs, create(&out.join("layers.csv"))?).context("writing layer log")?;
    if let Some(last) = logs.last() {
        println!(
            "steps={} tokens={} final_loss={:.6} total_gns_ema={}",
            logs.len(),
            last.tokens,
            last.loss,
            last.total.gns_ema.map(|v| format!("{v:.6}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn write_saved(path: &Path, saved: &[(f64, f64)]) -> anyhow::Result<()> {
    let mut w = gnskit_csv_writer(path)?;
    w.write_record(["loss_level", "tokens_saved"])?;
    for (level, s) in saved {
        w.write_record([level.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn gnskit_csv_writer(path: &Path) -> anyhow::Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

/// Tokens saved at the baseline's final smoothed loss, relative to the
/// tokens the baseline needed to first reach it.
fn final_saving(base: &[(f64, f64)], saved: &[(f64, f64)]) -> Option<(f64, f64)> {
    let level = base.last()?.1;
    let (_, s) = saved.iter().find(|(l, _)| *l == level)?;
    let reached = base.iter().find(|(_, l)| *l == level)?.0;
    Some((*s, s / reached))
}

fn run_schedule_compare(
    config: &Path,
    baseline: Option<&Path>,
    seeds: &[u64],
    out: &Path,
) -> Result<(), Failure> {
    let candidate = load_config(config)?;
    let base = match baseline {
        Some(p) => load_config(p)?,
        None => TrainConfig {
            batch_schedule: ScheduleSpec::Fixed {
                batch_size: candidate.batch_schedule.final_batch_size(),
            },
            ..candidate.clone()
        },
    };
    out_dir(out)?;
    let (mut base_curves, mut cand_curves) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let base_logs = train_logs(TrainConfig { seed, ..base.clone() })?;
        let cand_logs = train_logs(TrainConfig {
            seed,
            ..candidate.clone()
        })?;
        write_step_csv(&base_logs, create(&out.join(format!("baseline_seed{seed}.csv")))?)
            .context("writing baseline log")?;
        write_step_csv(&cand_logs, create(&out.join(format!("candidate_seed{seed}.csv")))?)
            .context("writing candidate log")?;
        let b = smooth_loss(&loss_curve(&base_logs), LOSS_SMOOTHING_ALPHA).context("smoothing")?;
        let c = smooth_loss(&loss_curve(&cand_logs), LOSS_SMOOTHING_ALPHA).context("smoothing")?;
        let saved = tokens_saved(&b, &c).with_context(|| format!("seed {seed}"))?;
        write_saved(&out.join(format!("tokens_saved_seed{seed}.csv")), &saved)?;
        report(&format!("seed {seed}"), &b, &saved);
        base_curves.push(loss_curve(&base_logs));
        cand_curves.push(loss_curve(&cand_logs));
    }
    let b = smooth_loss(&mean_curve(&base_curves)?, LOSS_SMOOTHING_ALPHA).context("smoothing")?;
    let c = smooth_loss(&mean_curve(&cand_curves)?, LOSS_SMOOTHING_ALPHA).context("smoothing")?;
    let saved = tokens_saved(&b, &c).context("seed mean")?;
    write_saved(&out.join("tokens_saved_mean.csv"), &saved)?;
    report("seed mean", &b, &saved);
    Ok(())
}

fn report(label: &str, base: &[(f64, f64)], saved: &[(f64, f64)]) {
    match final_saving(base, saved) {
        Some((s, frac)) => println!(
            "{label}: final baseline loss {:.6}, tokens saved {s:.0} ({:.2}%)",
            base.last().map_or(f64::NAN, |p| p.1),
            100.0 * frac
        ),
        None => println!("{label}: candidate never reached the final baseline loss"),
    }
}

fn run_analyze(logs: &Path, alphas: &[f64], out: &Path) -> Result<(), Failure> {
    let path = if logs.is_dir() {
        logs.join("layers.csv")
    } else {
        logs.to_path_buf()
    };
    let file = File::open(&path)
        .with_context(|| format!("opening layer log {}", path.display()))
        .map_err(Failure::Usage)?;
    let rows = read_layer_log(file).context("reading layer log")?;
    if rows.is_empty() {
        return Err(Failure::Runtime(anyhow!("layer log {} has no rows", path.display())));
    }
    let (total, per_type) = component_series(&rows).context("assembling series")?;
    let fits = regress_layer_gns(&total, &per_type, alphas).context("regression")?;
    if fits.is_empty() {
        return Err(Failure::Runtime(anyhow!("no layer types to regress")));
    }
    out_dir(out)?;
    let mut w = gnskit_csv_writer(&out.join("regression.csv"))?;
    w.write_record(["layer_type", "alpha", "slope", "pearson_r"])
        .context("writing regression")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for f in &fits {
        w.write_record([
            f.layer_type.to_string(),
            f.alpha.to_string(),
            opt(f.fit.slope),
            opt(f.fit.pearson_r),
        ])
        .context("writing regression")?;
        println!(
            "{} alpha={} slope={} r={}",
            f.layer_type,
            f.alpha,
            opt(f.fit.slope),
            opt(f.fit.pearson_r)
        );
    }
    w.flush().context("writing regression")?;
    Ok(())
}
