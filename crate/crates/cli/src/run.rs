use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use dpdist::attacks::{empirical_mean, ppde_mechanism, run_tracing_attack, AttackConfig};
use dpdist::cov::CovEstimate;
use dpdist::cov_unbounded::{final_rho, pgce_no_bound, pgce_no_bound_budget, ppc_range_budget};
use dpdist::linalg::{
    mahalanobis_mat, mahalanobis_vec, read_samples_csv, sample_gaussian, write_samples_csv, GaussianParams,
};
use dpdist::mean::{learn_gaussian, pme, MeanEstimate};
use dpdist::metrics::{
    product_sd_upper, tv_gaussian_same_cov, tv_product_exact, DistanceReport, Tv, MAX_EXACT_PRODUCT_DIM,
};
use dpdist::privacy::zcdp_to_approx_dp;
use dpdist::product::{ppde, ppde_flip_heavy, BinaryMatrix, PpdeEstimate, ProductModel, ProductSamples};
use dpdist::{NoiseSource, PrivacyBudget, SymMatrix};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{AttackMechanism, ExperimentConfig, ModelSpec, Task};
use crate::ledger::BudgetLedger;
use crate::report::{summarize, Metric, Report, TrialRecord};

/// Samples one cell estimates from.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Real(DMatrix<f64>),
    Bits(BinaryMatrix),
}

impl Samples {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        match self {
            Samples::Real(x) => write_samples_csv(f, x, false)?,
            Samples::Bits(b) => b.write_csv(f)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Gaussian(GaussianParams),
    Product(ProductModel),
}

/// Ground truth of the synthetic model; `None` for the attack, which draws
/// its own parameters.
pub fn truth(cfg: &ExperimentConfig) -> Result<Option<Truth>> {
    if cfg.task == Task::Attack {
        return Ok(None);
    }
    let d = cfg.dim()?;
    let geometric = |j: usize| if d == 1 { 1.0 } else { cfg.kappa.powf(j as f64 / (d - 1) as f64) };
    let centered = matches!(cfg.task, Task::GaussianCov | Task::GaussianCovUnbounded);
    let default_mean = |j: usize| {
        if centered {
            0.0
        } else {
            let s = if j.is_multiple_of(2) { 1.0 } else { -1.0 };
            s * cfg.r_bound / (2.0 * (d as f64).sqrt())
        }
    };
    match (&cfg.model, cfg.task) {
        (Some(ModelSpec::Product { p }), _) => Ok(Some(Truth::Product(ProductModel::new(p.clone())?))),
        (None, Task::Product) => {
            let p = (0..d).map(|j| 0.5 / (j + 1) as f64).collect();
            Ok(Some(Truth::Product(ProductModel::new(p)?)))
        }
        (model, _) => {
            let (mean, diag, full) = match model {
                Some(ModelSpec::Gaussian { mean, cov_diag, cov }) => (mean.clone(), cov_diag.clone(), cov.clone()),
                _ => (None, None, None),
            };
            let mean = DVector::from_vec(mean.unwrap_or_else(|| (0..d).map(default_mean).collect()));
            if centered {
                ensure!(mean.iter().all(|&m| m == 0.0), "covariance tasks assume zero-mean data; use gaussian-full");
            }
            let cov = match (full, diag) {
                (Some(rows), _) => {
                    ensure!(rows.iter().all(|r| r.len() == d), "cov must be {d}×{d}");
                    SymMatrix::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))?
                }
                (None, Some(diag)) => SymMatrix::from_diagonal(&diag),
                (None, None) => SymMatrix::from_diagonal(&(0..d).map(geometric).collect::<Vec<_>>()),
            };
            Ok(Some(Truth::Gaussian(GaussianParams::new(mean, cov, cfg.r_bound, Some(cfg.kappa))?)))
        }
    }
}

/// Stream layout of cell (seed, trial): `seeded(seed).child(trial)`, whose
/// children 0, 1, 2 drive the data, the mechanism and the metrics.
fn cell_stream(seed: u64, trial: usize) -> NoiseSource {
    NoiseSource::seeded(seed).child(trial as u64)
}

fn load_file(cfg: &ExperimentConfig, path: &Path) -> Result<Samples> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let s = match cfg.task {
        Task::Product => {
            ensure!(!cfg.data_header, "binary data files have no header");
            Samples::Bits(BinaryMatrix::read_csv(f)?)
        }
        _ => Samples::Real(read_samples_csv(f, cfg.data_header)?),
    };
    Ok(s)
}

/// The samples of cell (seed, trial).
pub fn trial_samples(cfg: &ExperimentConfig, seed: u64, trial: usize) -> Result<Samples> {
    if let Some(path) = &cfg.data {
        return load_file(cfg, path);
    }
    let mut g = cell_stream(seed, trial).child(0);
    Ok(match truth(cfg)? {
        Some(Truth::Gaussian(p)) => Samples::Real(sample_gaussian(&p, cfg.n, &mut g)?),
        Some(Truth::Product(m)) => Samples::Bits(m.sample(cfg.n, &mut g)),
        None => bail!("task {} has no sample file to echo", cfg.task.name()),
    })
}

struct Outcome {
    metrics: Vec<Metric>,
    ledger: Option<BudgetLedger>,
    details: serde_json::Value,
}

#[derive(Default)]
struct Metrics(Vec<Metric>);

impl Metrics {
    fn push(&mut self, name: &str, value: f64) {
        self.0.push(Metric { name: name.to_string(), value });
    }
}

fn zcdp(rho: f64) -> PrivacyBudget {
    PrivacyBudget::Zcdp { rho }
}

fn cov_metrics(m: &mut Metrics, est: &CovEstimate, n: usize, truth: Option<&GaussianParams>) -> Result<()> {
    if let Some(p) = truth {
        m.push("mahalanobis_cov", mahalanobis_mat(&p.cov.sub(&est.sigma_hat), &p.cov)?);
        m.push("frobenius_rel", p.cov.sub(&est.sigma_hat).frobenius_norm() / p.cov.frobenius_norm());
    }
    m.push("kept_fraction", est.diagnostics.kept as f64 / n as f64);
    m.push("rounds", est.diagnostics.rounds as f64);
    m.push("kappa_final", est.diagnostics.kappa_final);
    Ok(())
}

fn sym_json(s: &SymMatrix) -> serde_json::Value {
    json!(s.matrix().row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn vec_json(v: &DVector<f64>) -> serde_json::Value {
    json!(v.as_slice())
}

/// Ledger of `pme` at ρ: the preconditioner rounds, then the coordinate-wise
/// stage at ρ.
fn pme_ledger(l: BudgetLedger, est: &MeanEstimate, rho: f64) -> BudgetLedger {
    let pre = est.preconditioner.as_ref().map_or(0.0, |p| p.rho_spent());
    l.zcdp_part("mean: preconditioner", pre).zcdp_part("mean: coordinate-wise", rho)
}

fn mean_metrics(m: &mut Metrics, est: &MeanEstimate, truth: Option<&GaussianParams>) -> Result<()> {
    m.push("aborted", est.is_aborted() as u8 as f64);
    if let (Some(mu), Some(p)) = (&est.mu_hat, truth) {
        m.push("mahalanobis_mean", mahalanobis_vec(&(mu - &p.mean), &p.cov)?);
        m.push("tv_known_cov", tv_gaussian_same_cov(&p.mean, mu, &p.cov)?);
    }
    Ok(())
}

fn mean_details(est: &MeanEstimate) -> serde_json::Value {
    json!({
        "mu_hat": est.mu_hat.as_ref().map(vec_json),
        "aborted": est.aborted,
        "budget_spent": est.budget_spent,
        "ignored_rows": est.ignored_rows,
        "preconditioner_rounds": est.preconditioner.as_ref().map(|p| &p.round_log),
        "coordinates": est.coords,
    })
}

/// ρ of each `ppde` release from its sensitivity B/m and noise level.
fn ppde_round_rhos(est: &PpdeEstimate) -> Vec<f64> {
    est.rounds
        .iter()
        .map(|r| {
            let sens = r.b / est.m as f64;
            sens * sens / (2.0 * r.noise_std * r.noise_std)
        })
        .collect()
}

fn real(s: Option<&Samples>) -> Result<&DMatrix<f64>> {
    match s {
        Some(Samples::Real(x)) => Ok(x),
        _ => bail!("expected real-valued samples"),
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    truth: Option<&Truth>,
    samples: Option<&Samples>,
    seed: u64,
    trial: usize,
) -> Result<Outcome> {
    let root = cell_stream(seed, trial);
    let mut mech = if cfg.zero_noise { NoiseSource::zero_noise_oracle() } else { root.child(1) };
    let mut metric_noise = root.child(2);
    let gauss = match truth {
        Some(Truth::Gaussian(p)) => Some(p),
        _ => None,
    };
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    let mut m = Metrics::default();
    match cfg.task {
        Task::GaussianCov => {
            let rho = cfg.rho()?;
            let x = real(samples)?;
            let est = dpdist::cov::pgce(x, rho, beta, cfg.kappa, &mut mech)?;
            cov_metrics(&mut m, &est, x.nrows(), gauss)?;
            let ledger = BudgetLedger::new(zcdp(rho), est.budget_spent)
                .zcdp_part("preconditioner", est.preconditioner.rho_spent())
                .zcdp_part("final estimate", rho / 2.0);
            let details = json!({ "sigma_hat": sym_json(&est.sigma_hat), "diagnostics": est.diagnostics,
                "rounds": est.preconditioner.round_log });
            Ok(Outcome { metrics: m.0, ledger: Some(ledger), details })
        }
        Task::GaussianCovUnbounded => {
            let (eps, delta) = cfg.eps_delta()?;
            let x = real(samples)?;
            let d = x.ncols();
            let est = pgce_no_bound(x, eps, delta, beta, &mut mech)?;
            cov_metrics(&mut m, &est, x.nrows(), gauss)?;
            let (de, dd) = pgce_no_bound_budget(eps, delta, d)?;
            let (pe, pd) = ppc_range_budget(eps, delta, d)?;
            let (fe, fd) = zcdp_to_approx_dp(final_rho(eps, delta), delta)?;
            let ledger = BudgetLedger::new(PrivacyBudget::ApproxDp { eps: de, delta: dd }, est.budget_spent)
                .part("range preconditioner", PrivacyBudget::ApproxDp { eps: pe, delta: pd })
                .part("final estimate", PrivacyBudget::ApproxDp { eps: fe, delta: fd });
            let details = json!({ "sigma_hat": sym_json(&est.sigma_hat), "diagnostics": est.diagnostics,
                "rounds": est.preconditioner.round_log, "input_eps": eps, "input_delta": delta });
            Ok(Outcome { metrics: m.0, ledger: Some(ledger), details })
        }
        Task::GaussianMean => {
            let rho = cfg.rho()?;
            let est = pme(real(samples)?, rho / 2.0, alpha, beta, cfg.r_bound, cfg.kappa, &mut mech)?;
            mean_metrics(&mut m, &est, gauss)?;
            let ledger = pme_ledger(BudgetLedger::new(zcdp(rho), est.budget_spent), &est, rho / 2.0);
            Ok(Outcome { metrics: m.0, ledger: Some(ledger), details: mean_details(&est) })
        }
        Task::GaussianFull => {
            let rho = cfg.rho()?;
            let est = learn_gaussian(real(samples)?, rho, alpha, beta, cfg.r_bound, cfg.kappa, &mut mech)?;
            mean_metrics(&mut m, &est.mean, gauss)?;
            if let (Some(p), Some(mu)) = (gauss, &est.mean.mu_hat) {
                let q = GaussianParams::unbounded(mu.clone(), est.cov.sigma_hat.clone())?;
                match DistanceReport::gaussian(p, &q, cfg.tv_samples, &mut metric_noise) {
                    Ok(r) => {
                        match r.tv {
                            Tv::Exact { value } => m.push("tv", value),
                            Tv::Estimate { mean, stderr } => {
                                m.push("tv", mean);
                                m.push("tv_stderr", stderr);
                            }
                        }
                        m.push("kl", r.kl);
                        m.push("chi2", r.chi2);
                        m.push("mahalanobis_cov", r.mahalanobis_cov);
                    }
                    Err(_) => m.push("tv", 1.0),
                }
            }
            let ledger = BudgetLedger::new(zcdp(rho), est.budget_spent)
                .zcdp_part("covariance: preconditioner", est.cov.preconditioner.rho_spent())
                .zcdp_part("covariance: final estimate", rho / 4.0);
            let ledger = pme_ledger(ledger, &est.mean, rho / 4.0);
            let details = json!({ "sigma_hat": sym_json(&est.cov.sigma_hat), "mean": mean_details(&est.mean),
                "cov_diagnostics": est.cov.diagnostics });
            Ok(Outcome { metrics: m.0, ledger: Some(ledger), details })
        }
        Task::Product => {
            let rho = cfg.rho()?;
            let Some(Samples::Bits(x)) = samples else { bail!("expected binary samples") };
            let est = if cfg.flip_heavy {
                ppde_flip_heavy(x, rho, alpha, beta, cfg.block_sizing, &mut mech)?
            } else {
                ppde(x, rho, alpha, beta, cfg.block_sizing, &mut mech)?
            };
            let q = &est.model.p;
            if let Some(Truth::Product(p)) = truth {
                if p.dim() <= MAX_EXACT_PRODUCT_DIM {
                    m.push("tv", tv_product_exact(&p.p, q)?);
                }
                m.push("sd_upper", product_sd_upper(&p.p, q)?);
                let max = p.p.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                m.push("max_abs_error", max);
            }
            m.push("clamped", est.clamped as f64);
            m.push("block_size", est.m as f64);
            m.push("blocks_used", est.rounds.len() as f64);
            let released = ppde_round_rhos(&est).into_iter().fold(0.0, f64::max);
            let mut ledger = BudgetLedger::new(zcdp(rho), est.budget_spent);
            if cfg.flip_heavy {
                ledger = ledger.zcdp_part("flip vote", rho / 10.0);
            }
            // Rounds read disjoint blocks of rows, so they compose in parallel.
            ledger = ledger.zcdp_part("block releases (max over rounds)", released);
            let details = json!({ "q": q, "m": est.m, "blocks": est.blocks, "flipped": est.flipped,
                "rounds": est.rounds });
            Ok(Outcome { metrics: m.0, ledger: Some(ledger), details })
        }
        Task::Attack => {
            let rho = cfg.rho()?;
            let atk = &cfg.attack;
            let acfg = AttackConfig {
                prior: atk.prior,
                n: cfg.n,
                d: cfg.dim()?,
                trials: atk.rounds,
                non_members: atk.non_members.unwrap_or(cfg.n),
            };
            let zero = cfg.zero_noise;
            let mut data_noise = root.child(0);
            let report = match atk.mechanism {
                AttackMechanism::Ppde => {
                    let mut inner = ppde_mechanism(rho, alpha, beta, cfg.block_sizing);
                    let mech = move |x: &DMatrix<f64>, g: &mut NoiseSource| {
                        if zero {
                            inner(x, &mut NoiseSource::zero_noise_oracle())
                        } else {
                            inner(x, g)
                        }
                    };
                    run_tracing_attack(mech, acfg, &mut data_noise)?
                }
                AttackMechanism::EmpiricalMean => run_tracing_attack(empirical_mean, acfg, &mut data_noise)?,
            };
            m.push("separation", report.separation);
            m.push("separation_stderr", report.separation_stderr);
            m.push("fp_lemma_lhs", report.fp_lemma_lhs);
            m.push("fp_lemma_stderr", report.fp_lemma_stderr);
            m.push("member_sum_mean", report.member_sum_mean);
            m.push("mechanism_failures", report.failures as f64);
            let ledger = match atk.mechanism {
                AttackMechanism::Ppde => {
                    Some(BudgetLedger::new(zcdp(rho), zcdp(rho)).zcdp_part("ppde per dataset", rho))
                }
                AttackMechanism::EmpiricalMean => None,
            };
            let details = json!({ "in_scores": report.in_scores, "out_scores": report.out_scores });
            Ok(Outcome { metrics: m.0, ledger, details })
        }
    }
}

/// Runs every (seed, trial) cell of `cfg` in parallel. Output is a pure
/// function of the configuration apart from the runtimes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let file = match &cfg.data {
        Some(path) => Some(Arc::new(load_file(cfg, path)?)),
        None => None,
    };
    let truth = match &file {
        Some(_) => None,
        None => truth(cfg)?,
    };
    let cells: Vec<(u64, usize)> = cfg.seeds.iter().flat_map(|&s| (0..cfg.trials).map(move |t| (s, t))).collect();
    let mut trials: Vec<TrialRecord> = cells
        .par_iter()
        .map(|&(seed, trial)| -> Result<TrialRecord> {
            let t0 = Instant::now();
            let samples = match (&file, cfg.task) {
                (_, Task::Attack) => None,
                (Some(s), _) => Some(Arc::clone(s)),
                (None, _) => Some(Arc::new(trial_samples(cfg, seed, trial)?)),
            };
            let (n, d) = match samples.as_deref() {
                None => (cfg.n, cfg.dim()?),
                Some(Samples::Real(x)) => (x.nrows(), x.ncols()),
                Some(Samples::Bits(b)) => (b.len(), b.dim()),
            };
            let (mut metrics, ledger, details, error) =
                match run_cell(cfg, truth.as_ref(), samples.as_deref(), seed, trial) {
                    Ok(o) => (o.metrics, o.ledger, o.details, None),
                    Err(e) => (Vec::new(), None, serde_json::Value::Null, Some(format!("{e:#}"))),
                };
            metrics.push(Metric { name: "failed".into(), value: error.is_some() as u8 as f64 });
            Ok(TrialRecord {
                seed,
                trial,
                n,
                d,
                metrics,
                ledger,
                details,
                error,
                runtime_ms: t0.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect::<Result<_>>()?;
    trials.sort_by_key(|t| (t.seed, t.trial));
    let summary = summarize(&trials);
    Ok(Report {
        task: cfg.task,
        config: cfg.clone(),
        param_json: cfg.param_json(),
        trials,
        summary,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// One report per value of `param`, in the given order.
pub fn run_sweep(cfg: &ExperimentConfig, param: &str, values: &[f64]) -> Result<Vec<Report>> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    values
        .iter()
        .map(|&v| run_experiment(&cfg.with_param(param, v)?).with_context(|| format!("{param} = {v}")))
        .collect()
}
