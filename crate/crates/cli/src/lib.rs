pub mod config;
pub mod ledger;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Task};
pub use ledger::{budget_ledger_check, BudgetLedger, LedgerCheck};
pub use report::{write_csv, write_json, write_outputs, Report, TrialRecord};
pub use run::{run_experiment, run_sweep, trial_samples};
