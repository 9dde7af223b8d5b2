use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use dpdist::attacks::Prior;
use dpdist::product::BlockSizing;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Covariance with a known condition-number bound (`pgce`).
    GaussianCov,
    /// Covariance with no a-priori bounds (`pgce_no_bound`).
    GaussianCovUnbounded,
    /// Mean with a known range and covariance bound (`pme`).
    GaussianMean,
    /// Mean and covariance together (`learn_gaussian`).
    GaussianFull,
    /// Binary product distribution (`ppde`).
    Product,
    /// Tracing attack against a mean estimator.
    Attack,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::GaussianCov => "gaussian-cov",
            Task::GaussianCovUnbounded => "gaussian-cov-unbounded",
            Task::GaussianMean => "gaussian-mean",
            Task::GaussianFull => "gaussian-full",
            Task::Product => "product",
            Task::Attack => "attack",
        }
    }
}

/// Ground truth for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Gaussian {
        #[serde(default)]
        mean: Option<Vec<f64>>,
        /// Diagonal covariance; ignored when `cov` is given.
        #[serde(default)]
        cov_diag: Option<Vec<f64>>,
        #[serde(default)]
        cov: Option<Vec<Vec<f64>>>,
    },
    Product {
        p: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMechanism {
    /// `ppde` on the ±1 data, at the configured ρ.
    Ppde,
    /// Non-private column means.
    EmpiricalMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub prior: Prior,
    pub mechanism: AttackMechanism,
    /// Fresh samples scored per attack trial; defaults to n.
    pub non_members: Option<usize>,
    /// Attack trials per (seed, trial) cell.
    pub rounds: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec { prior: Prior::Product, mechanism: AttackMechanism::Ppde, non_members: None, rounds: 50 }
    }
}

/// Everything a run depends on. Loaded from JSON, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub n: usize,
    /// Dimension of the default synthetic model; implied by `model` or `data`.
    pub d: Option<usize>,
    pub model: Option<ModelSpec>,
    /// CSV of samples to estimate from instead of synthetic data.
    pub data: Option<PathBuf>,
    pub data_header: bool,
    pub rho: Option<f64>,
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    /// Condition-number bound κ with I ⪯ Σ ⪯ κI.
    pub kappa: f64,
    /// Mean range bound R.
    pub r_bound: f64,
    pub seeds: Vec<u64>,
    pub trials: usize,
    pub block_sizing: BlockSizing,
    pub flip_heavy: bool,
    pub attack: AttackSpec,
    /// Monte Carlo draws for Gaussian TV.
    pub tv_samples: usize,
    /// Write the samples of the first (seed, trial) cell to samples.csv.
    pub echo_samples: bool,
    /// Replace every noise draw by zero. Output is not private.
    pub zero_noise: bool,
    pub i_understand_no_privacy: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::GaussianCov,
            n: 10_000,
            d: None,
            model: None,
            data: None,
            data_header: false,
            rho: None,
            eps: None,
            delta: None,
            alpha: 0.1,
            beta: 0.1,
            kappa: 100.0,
            r_bound: 10.0,
            seeds: vec![0],
            trials: 1,
            block_sizing: BlockSizing::default(),
            flip_heavy: false,
            attack: AttackSpec::default(),
            tv_samples: 20_000,
            echo_samples: false,
            zero_noise: false,
            i_understand_no_privacy: false,
        }
    }
}

/// The privacy parameters a task runs at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Privacy {
    Zcdp { rho: f64 },
    ApproxDp { eps: f64, delta: f64 },
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("parsing experiment config")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn privacy(&self) -> Result<Privacy> {
        match (self.rho, self.eps, self.delta) {
            (Some(rho), None, None) => {
                ensure!(rho > 0.0 && rho.is_finite(), "rho must be > 0, got {rho}");
                Ok(Privacy::Zcdp { rho })
            }
            (None, Some(eps), Some(delta)) => {
                ensure!(eps > 0.0 && eps.is_finite(), "eps must be > 0, got {eps}");
                ensure!(delta > 0.0 && delta < 1.0, "delta must be in (0,1), got {delta}");
                Ok(Privacy::ApproxDp { eps, delta })
            }
            (None, None, None) => bail!("no privacy budget: give rho, or eps and delta"),
            _ => bail!("give either rho or (eps, delta), not a mix"),
        }
    }

    pub fn rho(&self) -> Result<f64> {
        match self.privacy()? {
            Privacy::Zcdp { rho } => Ok(rho),
            Privacy::ApproxDp { .. } => bail!("task {} runs under zCDP; give rho", self.task.name()),
        }
    }

    pub fn eps_delta(&self) -> Result<(f64, f64)> {
        match self.privacy()? {
            Privacy::ApproxDp { eps, delta } => Ok((eps, delta)),
            Privacy::Zcdp { .. } => bail!("task {} runs under (eps, delta)-DP; give eps and delta", self.task.name()),
        }
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.zero_noise || self.i_understand_no_privacy,
            "zero-noise runs are not private; pass --i-understand-no-privacy to allow them"
        );
        ensure!(!self.seeds.is_empty(), "no seeds");
        ensure!(self.trials >= 1, "trials must be >= 1");
        ensure!(self.alpha > 0.0, "alpha must be > 0");
        ensure!(self.beta > 0.0 && self.beta < 1.0, "beta must be in (0,1)");
        ensure!(self.kappa >= 1.0, "kappa must be >= 1");
        ensure!(self.r_bound >= 0.0, "r_bound must be >= 0");
        ensure!(self.tv_samples >= 2, "tv_samples must be >= 2");
        match self.task {
            Task::GaussianCovUnbounded => {
                self.eps_delta()?;
            }
            _ => {
                self.rho()?;
            }
        }
        match (&self.model, self.task) {
            (Some(ModelSpec::Product { .. }), Task::Product) | (None, _) => {}
            (Some(ModelSpec::Gaussian { .. }), t) if !matches!(t, Task::Product | Task::Attack) => {}
            (Some(_), t) => bail!("model kind does not fit task {}", t.name()),
        }
        if self.task == Task::Attack {
            ensure!(self.data.is_none(), "the attack draws its own data");
            ensure!(self.attack.rounds >= 1, "attack rounds must be >= 1");
        }
        if self.data.is_none() {
            ensure!(self.n >= 1, "n must be >= 1");
            self.dim()?;
        }
        Ok(())
    }

    /// Dimension of the synthetic model.
    pub fn dim(&self) -> Result<usize> {
        let d = match &self.model {
            Some(ModelSpec::Product { p }) => p.len(),
            Some(ModelSpec::Gaussian { mean, cov_diag, cov }) => {
                let dims: Vec<usize> =
                    [mean.as_ref().map(Vec::len), cov_diag.as_ref().map(Vec::len), cov.as_ref().map(Vec::len)]
                        .into_iter()
                        .flatten()
                        .chain(self.d)
                        .collect();
                let Some(&d) = dims.first() else { bail!("gaussian model needs d, mean, cov_diag or cov") };
                ensure!(dims.iter().all(|&x| x == d), "model dimensions disagree: {dims:?}");
                d
            }
            None => self.d.context("set d or give a model")?,
        };
        ensure!(d >= 1, "dimension must be >= 1");
        if let Some(given) = self.d {
            ensure!(given == d, "d = {given} but the model has dimension {d}");
        }
        Ok(d)
    }

    /// Parameters that identify a run, as compact JSON for report rows.
    pub fn param_json(&self) -> String {
        let v = serde_json::json!({
            "rho": self.rho,
            "eps": self.eps,
            "delta": self.delta,
            "alpha": self.alpha,
            "beta": self.beta,
            "kappa": self.kappa,
            "r_bound": self.r_bound,
            "zero_noise": self.zero_noise,
        });
        let mut v = v;
        if self.task == Task::Product || self.task == Task::Attack {
            v["block_sizing"] = serde_json::to_value(self.block_sizing).expect("serializable");
        }
        if self.task == Task::Product {
            v["flip_heavy"] = self.flip_heavy.into();
        }
        v.to_string()
    }

    /// Applies `name=value` to the field of the same name, for sweeps.
    pub fn with_param(&self, name: &str, value: f64) -> Result<Self> {
        let mut c = self.clone();
        let as_count = || -> Result<usize> {
            ensure!(value >= 0.0 && value.fract() == 0.0, "{name} must be a whole number, got {value}");
            Ok(value as usize)
        };
        match name {
            "n" => c.n = as_count()?,
            "d" => {
                ensure!(c.model.is_none(), "sweeping d needs the default model");
                c.d = Some(as_count()?);
            }
            "rho" => c.rho = Some(value),
            "eps" => c.eps = Some(value),
            "delta" => c.delta = Some(value),
            "alpha" => c.alpha = value,
            "beta" => c.beta = value,
            "kappa" => c.kappa = value,
            "r_bound" => c.r_bound = value,
            _ => bail!("cannot sweep {name}; use one of n, d, rho, eps, delta, alpha, beta, kappa, r_bound"),
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let c = ExperimentConfig {
            task: Task::Product,
            model: Some(ModelSpec::Product { p: vec![0.1, 0.2] }),
            rho: Some(0.5),
            block_sizing: BlockSizing::Fixed(100),
            ..Default::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"task": "gaussian-mean", "d": 3, "rho": 1.0}"#).unwrap();
        assert_eq!(c.task, Task::GaussianMean);
        assert_eq!(c.n, 10_000);
        assert_eq!(c.dim().unwrap(), 3);
        c.validate().unwrap();
        assert!(ExperimentConfig::from_json(r#"{"rhoo": 1.0}"#).is_err());
    }

    #[test]
    fn privacy_regimes() {
        let mut c = ExperimentConfig { d: Some(2), ..Default::default() };
        assert!(c.validate().is_err());
        c.rho = Some(1.0);
        c.validate().unwrap();
        c.eps = Some(1.0);
        assert!(c.privacy().is_err());
        c.rho = None;
        c.delta = Some(1e-6);
        assert!(c.validate().is_err());
        c.task = Task::GaussianCovUnbounded;
        c.validate().unwrap();
    }

    #[test]
    fn zero_noise_needs_acknowledgement() {
        let mut c = ExperimentConfig { d: Some(2), rho: Some(1.0), zero_noise: true, ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().contains("not private"));
        c.i_understand_no_privacy = true;
        c.validate().unwrap();
    }

    #[test]
    fn dimension_checks() {
        let c = ExperimentConfig {
            d: Some(3),
            model: Some(ModelSpec::Gaussian { mean: Some(vec![0.0; 2]), cov_diag: None, cov: None }),
            rho: Some(1.0),
            ..Default::default()
        };
        assert!(c.dim().is_err());
        let c = ExperimentConfig { task: Task::Product, model: Some(ModelSpec::Product { p: vec![0.1] }), ..c };
        assert_eq!(c.dim().unwrap_err().to_string(), "d = 3 but the model has dimension 1");
    }

    #[test]
    fn sweep_params() {
        let c = ExperimentConfig::default();
        assert_eq!(c.with_param("n", 4096.0).unwrap().n, 4096);
        assert!(c.with_param("n", 1.5).is_err());
        assert!(c.with_param("seed", 1.0).is_err());
    }
}
