use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Task};
use crate::ledger::BudgetLedger;

pub const CSV_HEADER: [&str; 8] = ["task", "seed", "trial", "n", "d", "param_json", "metric", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

/// One (seed, trial) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub trial: usize,
    pub n: usize,
    pub d: usize,
    pub metrics: Vec<Metric>,
    /// `None` when the estimator failed or the mechanism is not private.
    pub ledger: Option<BudgetLedger>,
    /// Estimates and estimator diagnostics.
    pub details: serde_json::Value,
    pub error: Option<String>,
    pub runtime_ms: f64,
}

impl TrialRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }
}

/// Distribution of one metric over the trials that report it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: Task,
    pub config: ExperimentConfig,
    pub param_json: String,
    /// Trials sorted by (seed, trial).
    pub trials: Vec<TrialRecord>,
    pub summary: Vec<MetricSummary>,
    pub runtime_ms: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(trials: &[TrialRecord]) -> Vec<MetricSummary> {
    let mut names: Vec<&str> = Vec::new();
    for m in trials.iter().flat_map(|t| &t.metrics) {
        if !names.contains(&m.name.as_str()) {
            names.push(&m.name);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mut v: Vec<f64> = trials.iter().filter_map(|t| t.metric(name)).collect();
            v.sort_by(f64::total_cmp);
            MetricSummary {
                name: name.to_string(),
                count: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: quantile(&v, 0.5),
                q10: quantile(&v, 0.1),
                q90: quantile(&v, 0.9),
            }
        })
        .collect()
}

impl Report {
    pub fn summary_of(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|s| s.name == name)
    }

    fn write_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for t in &self.trials {
            for m in &t.metrics {
                w.write_record([
                    self.task.name(),
                    &t.seed.to_string(),
                    &t.trial.to_string(),
                    &t.n.to_string(),
                    &t.d.to_string(),
                    &self.param_json,
                    &m.name,
                    &m.value.to_string(),
                ])?;
            }
        }
        Ok(())
    }
}

/// Long-format CSV of every metric; byte-identical across runs of the same
/// configuration (runtimes live only in the JSON).
pub fn write_csv<W: Write>(reports: &[Report], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        r.write_rows(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(reports: &[Report], w: W) -> Result<()> {
    let value = match reports {
        [one] => serde_json::to_value(one)?,
        many => serde_json::json!({ "points": many, "runtime_ms": many.iter().map(|r| r.runtime_ms).sum::<f64>() }),
    };
    serde_json::to_writer_pretty(w, &value)?;
    Ok(())
}

/// Writes report.csv and report.json into `dir`.
pub fn write_outputs(reports: &[Report], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv = std::fs::File::create(dir.join("report.csv"))?;
    write_csv(reports, std::io::BufWriter::new(csv))?;
    let json = std::fs::File::create(dir.join("report.json"))?;
    let mut json = std::io::BufWriter::new(json);
    write_json(reports, &mut json)?;
    json.flush()?;
    Ok(())
}
