use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dpdist::attacks::Prior;
use dpdist::product::BlockSizing;
use dpdist_cli::config::AttackMechanism;
use dpdist_cli::{
    budget_ledger_check, run_experiment, run_sweep, trial_samples, write_outputs, ExperimentConfig, Report, Task,
};

#[derive(Parser)]
#[command(name = "dpdist", version, about = "Run private distribution-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Covariance with a known condition-number bound κ.
    EstimateCov(Common),
    /// Covariance with no a-priori bounds; needs --eps and --delta.
    EstimateCovUnbounded(Common),
    /// Mean with a known range R and covariance bound κ.
    EstimateMean(Common),
    /// Mean and covariance together.
    LearnGaussian(Common),
    /// Binary product distribution.
    LearnProduct {
        #[command(flatten)]
        common: Common,
        /// Allow coordinate means above 1/2 (spends ρ/10 on a flip vote).
        #[arg(long)]
        flip_heavy: bool,
    },
    /// Tracing attack against a mean estimator.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mechanism: Option<AttackMechanism>,
        /// Gaussian prior with mean range R; product prior when absent.
        #[arg(long)]
        gaussian_prior: Option<f64>,
        /// Attack trials per (seed, trial) cell.
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        non_members: Option<usize>,
    },
    /// Repeat one task over a list of values of a parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Option<Task>,
        /// One of n, d, rho, eps, delta, alpha, beta, kappa, r_bound.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeatable; replaces the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, conflicts_with_all = ["eps", "delta"])]
    rho: Option<f64>,
    #[arg(long, requires = "delta")]
    eps: Option<f64>,
    #[arg(long, requires = "eps")]
    delta: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    r_bound: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// CSV of samples instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    data_header: bool,
    /// Fixed block size for the product learner.
    #[arg(long, conflicts_with = "block_constant")]
    block_size: Option<usize>,
    /// Constant of the block-size formula.
    #[arg(long)]
    block_constant: Option<f64>,
    /// Monte Carlo draws for Gaussian TV.
    #[arg(long)]
    tv_samples: Option<usize>,
    /// Also write samples.csv for the first cell.
    #[arg(long)]
    echo_samples: bool,
    /// Add no noise. The output is not private.
    #[arg(long, requires = "i_understand_no_privacy")]
    zero_noise: bool,
    #[arg(long)]
    i_understand_no_privacy: bool,
}

impl Common {
    fn config(&self, task: Option<Task>) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(t) = task {
            c.task = t;
        }
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        if let Some(rho) = self.rho {
            (c.rho, c.eps, c.delta) = (Some(rho), None, None);
        }
        if let (Some(eps), Some(delta)) = (self.eps, self.delta) {
            (c.rho, c.eps, c.delta) = (None, Some(eps), Some(delta));
        }
        set(&mut c.trials, self.trials);
        set(&mut c.n, self.n);
        set(&mut c.kappa, self.kappa);
        set(&mut c.r_bound, self.r_bound);
        set(&mut c.alpha, self.alpha);
        set(&mut c.beta, self.beta);
        set(&mut c.tv_samples, self.tv_samples);
        if self.d.is_some() {
            c.d = self.d;
        }
        if self.data.is_some() {
            c.data = self.data.clone();
        }
        c.data_header |= self.data_header;
        c.echo_samples |= self.echo_samples;
        c.zero_noise |= self.zero_noise;
        c.i_understand_no_privacy |= self.i_understand_no_privacy;
        if let Some(m) = self.block_size {
            c.block_sizing = BlockSizing::Fixed(m);
        }
        if let Some(k) = self.block_constant {
            c.block_sizing = BlockSizing::Formula { constant: k };
        }
        Ok(c)
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn print_report(r: &Report) {
    println!("{} ({} cells, {:.0} ms) {}", r.task.name(), r.trials.len(), r.runtime_ms, r.param_json);
    for s in &r.summary {
        println!("  {:<20} median {:<12.5} [q10 {:.5}, q90 {:.5}] over {}", s.name, s.median, s.q10, s.q90, s.count);
    }
    for t in r.trials.iter().filter(|t| t.error.is_some()) {
        println!("  seed {} trial {} failed: {}", t.seed, t.trial, t.error.as_deref().unwrap_or_default());
    }
}

fn execute(cli: Cli) -> Result<bool> {
    let (common, cfg, sweep) = match cli.command {
        Command::EstimateCov(c) => {
            let cfg = c.config(Some(Task::GaussianCov))?;
            (c, cfg, None)
        }
        Command::EstimateCovUnbounded(c) => {
            let cfg = c.config(Some(Task::GaussianCovUnbounded))?;
            (c, cfg, None)
        }
        Command::EstimateMean(c) => {
            let cfg = c.config(Some(Task::GaussianMean))?;
            (c, cfg, None)
        }
        Command::LearnGaussian(c) => {
            let cfg = c.config(Some(Task::GaussianFull))?;
            (c, cfg, None)
        }
        Command::LearnProduct { common, flip_heavy } => {
            let mut cfg = common.config(Some(Task::Product))?;
            cfg.flip_heavy |= flip_heavy;
            (common, cfg, None)
        }
        Command::Attack { common, mechanism, gaussian_prior, rounds, non_members } => {
            let mut cfg = common.config(Some(Task::Attack))?;
            set(&mut cfg.attack.mechanism, mechanism);
            if let Some(r) = gaussian_prior {
                cfg.attack.prior = Prior::Gaussian { r };
            }
            set(&mut cfg.attack.rounds, rounds);
            if non_members.is_some() {
                cfg.attack.non_members = non_members;
            }
            (common, cfg, None)
        }
        Command::Sweep { common, task, param, values } => {
            let cfg = common.config(task)?;
            (common, cfg, Some((param, values)))
        }
    };
    let reports = match &sweep {
        Some((param, values)) => run_sweep(&cfg, param, values)?,
        None => vec![run_experiment(&cfg)?],
    };
    write_outputs(&reports, &common.out)?;
    if cfg.echo_samples && cfg.task != Task::Attack {
        let first = &reports[0].config;
        trial_samples(first, first.seeds[0], 0)?
            .write_csv(&common.out.join("samples.csv"))
            .context("writing samples.csv")?;
    }
    let mut ok = true;
    for r in &reports {
        print_report(r);
        match budget_ledger_check(r) {
            Ok(c) => println!("  budget ledger: ok ({} checked, {} skipped)", c.checked, c.skipped),
            Err(e) => {
                println!("  budget ledger: FAILED: {e:#}");
                ok = false;
            }
        }
    }
    println!("wrote {}", common.out.display());
    Ok(ok)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
