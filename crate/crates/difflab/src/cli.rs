//! The `difflab` command-line frontend: verification suites, forward/reverse
//! simulation, tabular training, probability-flow likelihoods, and report
//! conversion. JSON config in, JSON/CSV/JSON-lines out; outputs carry no
//! timestamps so reruns with the same (config, seed) are byte-identical.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::categorical::{forward_prob, NoiseDistribution};
use crate::ctmc::{rate_from_schedule, simulate_exact_planned, thinning_plan, JumpPath};
use crate::error::{Error, Result};
use crate::losses::DiscreteKernel;
use crate::rng::stream_rng;
use crate::schedule::NoiseSchedule;
use crate::sde::{
    euler_maruyama, exact_loglik, ks_statistic, pushforward_mixture, Direction,
    MixtureDensity, SdePath,
};
use crate::simplex::SequenceDistribution;
use crate::trainer::{train, TrainConfig, TrainReport};
use crate::verify::{run_suite, Suite, SuiteReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(name = "difflab", version, about = "Diffusion-process numerical laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run named property suites and report pass/fail per check.
    Verify {
        /// all|schedule|gaussian|categorical|ctmc|sde|losses|generator|trainer
        #[arg(long, default_value = "all")]
        suite: String,
        /// Write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Simulate forward or reverse processes and write trace + summary files.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for independent paths; outputs are reduced in
        /// path order regardless of the thread count.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train the tabular denoiser on a bundled or user data distribution.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Probability-flow exact log-likelihoods for a mixture config.
    Likelihood {
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert a verify/train JSON report into plot-ready CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Verify { suite, json } => cmd_verify(&suite, json.as_deref()),
        Command::Simulate { config, seed, jobs } => cmd_simulate(&config, seed, jobs),
        Command::Train { config, seed } => cmd_train(&config, seed),
        Command::Likelihood { config } => cmd_likelihood(&config),
        Command::Report { input, output } => cmd_report(&input, &output),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) | Error::Domain(_) => EXIT_USAGE,
                _ => EXIT_CHECK_FAILED,
            }
        }
    }
}

fn cmd_verify(suite: &str, json_out: Option<&Path>) -> Result<i32> {
    let suite: Suite = suite.parse().map_err(Error::Config)?;
    let reports: Vec<SuiteReport> = run_suite(suite)?;
    for report in &reports {
        for check in &report.checks {
            println!(
                "[{}] {} {} (measured {:.3e}, tolerance {:.3e})",
                report.suite, check.name, check.status, check.measured, check.tolerance
            );
        }
    }
    let all_passed = reports.iter().all(SuiteReport::passed);
    if let Some(path) = json_out {
        fs::write(path, serde_json::to_string_pretty(&reports)?)?;
    }
    println!("verify: {}", if all_passed { "all checks passed" } else { "FAILURES" });
    Ok(if all_passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Space {
    Discrete,
    Continuous,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    space: Space,
    schedule: NoiseSchedule,
    #[serde(default)]
    kernel: Option<NoiseDistribution>,
    #[serde(default)]
    mixture: Option<MixtureDensity>,
    #[serde(default)]
    direction: Option<Direction>,
    dims: usize,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default = "default_horizon")]
    horizon: f64,
    paths: usize,
    seed: u64,
    #[serde(default)]
    x0_discrete: Option<Vec<usize>>,
    #[serde(default)]
    x0_continuous: Option<f64>,
    #[serde(default = "default_stride")]
    trace_stride: usize,
    output: PathBuf,
    summary: PathBuf,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_stride() -> usize {
    1
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
}

fn cmd_simulate(config_path: &Path, seed_override: Option<u64>, jobs: usize) -> Result<i32> {
    let mut cfg: SimulateConfig = load_config(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    if cfg.paths == 0 {
        return Err(Error::Config("paths must be at least 1".into()));
    }
    if jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    match cfg.space {
        Space::Discrete => simulate_discrete(&cfg, jobs),
        Space::Continuous => simulate_continuous(&cfg, jobs),
    }
}

#[derive(Serialize)]
struct DiscreteSummary {
    paths: usize,
    dims: usize,
    horizon: f64,
    seed: u64,
    events_total: usize,
    /// Per-coordinate empirical symbol frequencies at the horizon.
    empirical_marginals: Vec<Vec<f64>>,
    /// Closed-form forward marginals at the horizon.
    closed_form_marginals: Vec<Vec<f64>>,
    /// Worst |empirical - closed| over coordinates and symbols, in units of
    /// the binomial standard error.
    max_z_score: f64,
    mask_fraction_empirical: Option<f64>,
    mask_fraction_closed_form: Option<f64>,
}

fn simulate_discrete(cfg: &SimulateConfig, jobs: usize) -> Result<i32> {
    let noise = cfg
        .kernel
        .as_ref()
        .ok_or_else(|| Error::Config("discrete simulation requires 'kernel'".into()))?;
    let x0 = cfg
        .x0_discrete
        .clone()
        .ok_or_else(|| Error::Config("discrete simulation requires 'x0_discrete'".into()))?;
    if x0.len() != cfg.dims {
        return Err(Error::Config("x0_discrete length must equal dims".into()));
    }
    let k = noise.k_total();
    if x0.iter().any(|&s| s >= k) {
        return Err(Error::Config("x0_discrete symbol outside the alphabet".into()));
    }
    let schedule = cfg.schedule.clone();
    let rate_fn = {
        let schedule = schedule.clone();
        let noise = noise.clone();
        move |t: f64| rate_from_schedule(&schedule, &noise, t)
    };
    let plan = thinning_plan(&rate_fn, cfg.dims, cfg.horizon)?;
    let paths: Vec<JumpPath> = run_indexed(jobs, cfg.paths, |i| {
        simulate_exact_planned(&rate_fn, cfg.dims, &x0, &plan, cfg.seed, i as u64)
    })?;

    // Trace: one JSON object per line.
    let mut out = fs::File::create(&cfg.output)?;
    for path in &paths {
        writeln!(out, "{}", serde_json::to_string(path)?)?;
    }

    let mut counts = vec![vec![0usize; k]; cfg.dims];
    let mut events_total = 0;
    for path in &paths {
        events_total += path.events.len();
        for (coord, &s) in path.final_state(cfg.horizon).iter().enumerate() {
            counts[coord][s] += 1;
        }
    }
    let a1 = schedule.alpha(cfg.horizon.min(1.0))?;
    let mut empirical = Vec::new();
    let mut closed = Vec::new();
    let mut max_z: f64 = 0.0;
    for coord in 0..cfg.dims {
        let emp: Vec<f64> =
            counts[coord].iter().map(|&c| c as f64 / cfg.paths as f64).collect();
        let cf: Vec<f64> = (0..k).map(|sym| forward_prob(sym, x0[coord], a1, noise)).collect();
        for (e, c) in emp.iter().zip(&cf) {
            let se = (c * (1.0 - c) / cfg.paths as f64).sqrt().max(1e-12);
            max_z = max_z.max((e - c).abs() / se);
        }
        empirical.push(emp);
        closed.push(cf);
    }
    let (mask_emp, mask_cf) = match noise.mask_index() {
        Some(mask) => {
            let emp = empirical.iter().map(|m| m[mask]).sum::<f64>() / cfg.dims as f64;
            (Some(emp), Some(1.0 - a1))
        }
        None => (None, None),
    };
    let summary = DiscreteSummary {
        paths: cfg.paths,
        dims: cfg.dims,
        horizon: cfg.horizon,
        seed: cfg.seed,
        events_total,
        empirical_marginals: empirical,
        closed_form_marginals: closed,
        max_z_score: max_z,
        mask_fraction_empirical: mask_emp,
        mask_fraction_closed_form: mask_cf,
    };
    fs::write(&cfg.summary, serde_json::to_string_pretty(&summary)?)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ContinuousSummary {
    paths: usize,
    steps: usize,
    direction: Direction,
    seed: u64,
    terminal_mean: f64,
    terminal_variance: f64,
    ks_vs_closed_form: f64,
}

fn simulate_continuous(cfg: &SimulateConfig, jobs: usize) -> Result<i32> {
    let data = cfg
        .mixture
        .as_ref()
        .ok_or_else(|| Error::Config("continuous simulation requires 'mixture'".into()))?;
    let steps = cfg
        .steps
        .ok_or_else(|| Error::Config("continuous simulation requires 'steps'".into()))?;
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if cfg.dims != 1 {
        return Err(Error::Config("the SDE engine is one-dimensional (dims = 1)".into()));
    }
    let direction = cfg.direction.unwrap_or(Direction::Forward);
    let schedule = cfg.schedule.clone();
    let q1 = pushforward_mixture(data, &schedule, 1.0)?;
    let paths: Vec<SdePath> = run_indexed(jobs, cfg.paths, |i| {
        // Initial state: explicit x0, or drawn from the appropriate endpoint law.
        let x_init = match (direction, cfg.x0_continuous) {
            (Direction::Forward, Some(x0)) => x0,
            (Direction::Forward, None) => {
                let mut rng = stream_rng(cfg.seed ^ 0x9e3779b9, i as u64);
                data.sample(&mut rng)
            }
            (Direction::Reverse, _) => {
                let mut rng = stream_rng(cfg.seed ^ 0x9e3779b9, i as u64);
                q1.sample(&mut rng)
            }
        };
        euler_maruyama(direction, data, &schedule, x_init, steps, cfg.seed, i as u64)
    })?;

    let mut out = fs::File::create(&cfg.output)?;
    writeln!(out, "path,t,x")?;
    for (i, path) in paths.iter().enumerate() {
        for (j, (&t, &x)) in path.times().iter().zip(path.states()).enumerate() {
            if j % cfg.trace_stride == 0 || j + 1 == path.times().len() {
                writeln!(out, "{i},{t},{x}")?;
            }
        }
    }

    let mut terminals: Vec<f64> =
        paths.iter().map(|p| p.terminal(direction)).collect();
    let n = terminals.len() as f64;
    let mean = terminals.iter().sum::<f64>() / n;
    let var = terminals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let ks = match direction {
        Direction::Forward => ks_statistic(&mut terminals, |x| q1.cdf(x)),
        Direction::Reverse => ks_statistic(&mut terminals, |x| data.cdf(x)),
    };
    let summary = ContinuousSummary {
        paths: cfg.paths,
        steps,
        direction,
        seed: cfg.seed,
        terminal_mean: mean,
        terminal_variance: var,
        ks_vs_closed_form: ks,
    };
    fs::write(&cfg.summary, serde_json::to_string_pretty(&summary)?)?;
    Ok(EXIT_OK)
}

/// Runs `f` over indices 0..n on `jobs` threads; results always come back in
/// index order, so the output is independent of the thread count.
fn run_indexed<T, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(jobs);
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let мut_chunks: Vec<&mut [Option<Result<T>>]> = slots.chunks_mut(chunk).collect();
        for (c, slice) in мut_chunks.into_iter().enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (off, slot) in slice.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk + off));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("filled by worker")).collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCmdConfig {
    k: usize,
    d: usize,
    kernel: NoiseDistribution,
    schedule: NoiseSchedule,
    q_data: Vec<DataAtom>,
    epochs: usize,
    lr: f64,
    #[serde(default = "default_bins")]
    bins: usize,
    #[serde(default = "default_quad_nodes")]
    quad_nodes: usize,
    #[serde(default = "default_eval_steps")]
    eval_steps: usize,
    seed: u64,
    model_output: PathBuf,
    report_output: PathBuf,
}

fn default_bins() -> usize {
    32
}
fn default_quad_nodes() -> usize {
    65
}
fn default_eval_steps() -> usize {
    256
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataAtom {
    seq: Vec<usize>,
    p: f64,
}

fn cmd_train(config_path: &Path, seed_override: Option<u64>) -> Result<i32> {
    let mut cfg: TrainCmdConfig = load_config(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    let states = cfg
        .k
        .checked_pow(cfg.d as u32)
        .ok_or_else(|| Error::Config("k^d overflows".into()))?;
    let mut probs = vec![0.0; states];
    for atom in &cfg.q_data {
        if atom.seq.len() != cfg.d || atom.seq.iter().any(|&s| s >= cfg.k) {
            return Err(Error::Config(format!("bad data atom {:?}", atom.seq)));
        }
        probs[crate::simplex::seq_to_index(&atom.seq, cfg.k)] += atom.p;
    }
    let q_data = SequenceDistribution::new(cfg.k, cfg.d, probs)
        .map_err(|e| Error::Config(format!("q_data is not a distribution: {e}")))?;
    let kernel = DiscreteKernel::new(cfg.schedule.clone(), cfg.kernel.clone());
    if kernel.k_data() != cfg.k {
        return Err(Error::Config(format!(
            "kernel clean alphabet {} does not match k = {}",
            kernel.k_data(),
            cfg.k
        )));
    }
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        bins: cfg.bins,
        quad_nodes: cfg.quad_nodes,
        eval_steps: cfg.eval_steps,
        elbo_check_interval: (cfg.epochs / 4).max(1),
        seed: cfg.seed,
    };
    let (model, report) = train(&q_data, &kernel, &train_cfg)?;
    fs::write(&cfg.model_output, model.to_json()?)?;
    fs::write(&cfg.report_output, serde_json::to_string_pretty(&report)?)?;
    println!(
        "train: final_tv = {:.6}, elbo_slack = {:.3e}, epochs = {}",
        report.final_tv,
        report.elbo_gap,
        report.loss_curve.len() - 1
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LikelihoodConfig {
    mixture: MixtureDensity,
    schedule: NoiseSchedule,
    points: Vec<f64>,
    #[serde(default = "default_loglik_steps")]
    steps: usize,
    output: PathBuf,
}

fn default_loglik_steps() -> usize {
    512
}

fn cmd_likelihood(config_path: &Path) -> Result<i32> {
    let cfg: LikelihoodConfig = load_config(config_path)?;
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if cfg.points.is_empty() {
        return Err(Error::Config("need at least one evaluation point".into()));
    }
    let mut out = fs::File::create(&cfg.output)?;
    writeln!(out, "x,loglik,analytic,abs_error")?;
    let mut worst: f64 = 0.0;
    for &x in &cfg.points {
        let ll = exact_loglik(&cfg.mixture, &cfg.schedule, x, cfg.steps)?;
        let analytic = cfg.mixture.log_density(x)?;
        let err = (ll - analytic).abs();
        worst = worst.max(err);
        writeln!(out, "{x},{ll},{analytic},{err}")?;
    }
    println!("likelihood: {} points, max abs error {worst:.3e}", cfg.points.len());
    Ok(EXIT_OK)
}

fn cmd_report(input: &Path, output: &Path) -> Result<i32> {
    let text = fs::read_to_string(input).map_err(|e| {
        Error::Config(format!("cannot read report {}: {e}", input.display()))
    })?;
    let mut out = fs::File::create(output)?;
    if let Ok(reports) = serde_json::from_str::<Vec<SuiteReport>>(&text) {
        writeln!(out, "suite,check,status,measured,tolerance")?;
        for report in &reports {
            for check in &report.checks {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    report.suite, check.name, check.status, check.measured, check.tolerance
                )?;
            }
        }
        return Ok(EXIT_OK);
    }
    if let Ok(report) = serde_json::from_str::<TrainReport>(&text) {
        writeln!(out, "epoch,loss")?;
        for (epoch, loss) in report.loss_curve.iter().enumerate() {
            writeln!(out, "{epoch},{loss}")?;
        }
        return Ok(EXIT_OK);
    }
    Err(Error::Config(format!(
        "{} is neither a verify report nor a train report",
        input.display()
    )))
}
