use anyhow::{bail, ensure, Result};
use dpdist::privacy::{compose_approx_dp, ApproxComposition};
use dpdist::PrivacyBudget;
use serde::{Deserialize, Serialize};

use crate::report::Report;

/// Relative tolerance of the ledger check.
pub const LEDGER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: String,
    pub budget: PrivacyBudget,
}

/// Privacy accounting of one estimator call: what the configuration allows,
/// what the estimator reports, and the sequentially composed stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub declared: PrivacyBudget,
    pub reported: PrivacyBudget,
    pub parts: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn new(declared: PrivacyBudget, reported: PrivacyBudget) -> Self {
        BudgetLedger { declared, reported, parts: Vec::new() }
    }

    pub fn part(mut self, stage: &str, budget: PrivacyBudget) -> Self {
        self.parts.push(LedgerEntry { stage: stage.to_string(), budget });
        self
    }

    pub fn zcdp_part(self, stage: &str, rho: f64) -> Self {
        self.part(stage, PrivacyBudget::Zcdp { rho })
    }

    /// Basic composition of the parts, which must share one regime: ρ adds
    /// under zCDP, ε and δ add under (ε, δ)-DP.
    pub fn composed(&self) -> Result<PrivacyBudget> {
        if let Some(rho) = self.parts.iter().map(|p| p.budget.rho()).sum::<Option<f64>>() {
            return Ok(PrivacyBudget::Zcdp { rho });
        }
        let pairs = self
            .parts
            .iter()
            .map(|p| match p.budget {
                PrivacyBudget::ApproxDp { eps, delta } => Ok((eps, delta)),
                PrivacyBudget::PureDp { eps } => Ok((eps, 0.0)),
                PrivacyBudget::Zcdp { .. } => {
                    bail!("stage {} is zCDP in an (eps, delta) ledger; convert it first", p.stage)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (eps, delta) = compose_approx_dp(&pairs, ApproxComposition::Basic)?;
        Ok(PrivacyBudget::ApproxDp { eps, delta })
    }

    /// The reported budget equals the declared one, and the stages compose
    /// to no more than it.
    pub fn check(&self) -> Result<()> {
        ensure!(
            same(self.reported, self.declared, close),
            "reported {:?} differs from declared {:?}",
            self.reported,
            self.declared
        );
        let composed = self.composed()?;
        ensure!(
            same(composed, self.declared, |a, b| a <= b + LEDGER_TOL * b.abs().max(1.0)),
            "stages compose to {composed:?}, over the declared {:?}",
            self.declared
        );
        Ok(())
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= LEDGER_TOL * b.abs().max(1.0)
}

fn same(a: PrivacyBudget, b: PrivacyBudget, cmp: impl Fn(f64, f64) -> bool) -> bool {
    use PrivacyBudget::*;
    match (a, b) {
        (Zcdp { rho: x }, Zcdp { rho: y }) => cmp(x, y),
        (PureDp { eps: x }, PureDp { eps: y }) => cmp(x, y),
        (ApproxDp { eps: e1, delta: d1 }, ApproxDp { eps: e2, delta: d2 }) => cmp(e1, e2) && cmp(d1, d2),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerCheck {
    pub checked: usize,
    /// Trials without accounting: failed runs and non-private mechanisms.
    pub skipped: usize,
}

/// Checks the ledger of every trial in `report`.
pub fn budget_ledger_check(report: &Report) -> Result<LedgerCheck> {
    let mut out = LedgerCheck { checked: 0, skipped: 0 };
    for t in &report.trials {
        match &t.ledger {
            Some(l) => {
                l.check().map_err(|e| e.context(format!("seed {} trial {}", t.seed, t.trial)))?;
                out.checked += 1;
            }
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z(rho: f64) -> PrivacyBudget {
        PrivacyBudget::Zcdp { rho }
    }

    #[test]
    fn zcdp_parts_add() {
        let l = BudgetLedger::new(z(1.0), z(1.0)).zcdp_part("a", 0.5).zcdp_part("b", 0.5);
        assert_eq!(l.composed().unwrap(), z(1.0));
        l.check().unwrap();
        let over = BudgetLedger::new(z(1.0), z(1.0)).zcdp_part("a", 0.6).zcdp_part("b", 0.5);
        assert!(over.check().unwrap_err().to_string().contains("over the declared"));
        let under = BudgetLedger::new(z(1.0), z(1.0)).zcdp_part("a", 0.25);
        under.check().unwrap();
    }

    #[test]
    fn reported_must_match() {
        let l = BudgetLedger::new(z(1.0), z(2.0)).zcdp_part("a", 1.0);
        assert!(l.check().is_err());
        let l = BudgetLedger::new(z(1.0), z(1.0 + 1e-12)).zcdp_part("a", 1.0);
        l.check().unwrap();
    }

    #[test]
    fn approx_parts_add() {
        let declared = PrivacyBudget::ApproxDp { eps: 0.75, delta: 2e-6 };
        let l = BudgetLedger::new(declared, declared)
            .part("a", PrivacyBudget::ApproxDp { eps: 0.5, delta: 1e-6 })
            .part("b", PrivacyBudget::ApproxDp { eps: 0.25, delta: 1e-6 });
        assert_eq!(l.composed().unwrap(), declared);
        l.check().unwrap();
        let mixed = BudgetLedger::new(declared, declared).zcdp_part("c", 0.1).part("a", declared);
        assert!(mixed.check().is_err());
    }
}
