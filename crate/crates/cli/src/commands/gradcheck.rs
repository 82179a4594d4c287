use care_core::checks::{full_model_check, primitive_checks, CheckRow, TOLERANCE};
use care_core::model::CareConfig;
use serde::Serialize;

use super::{finish, Outcome};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{Outputs, Report, Table};

#[derive(Serialize)]
struct GradcheckResult {
    tolerance: f64,
    all_passed: bool,
    rows: Vec<CheckRow>,
}

/// One row per graph primitive plus the full model on the tiny config.
pub fn gradcheck(cfg: &RunConfig, force: bool) -> Result<Outcome, CliError> {
    if cfg.gradcheck_trials == 0 {
        return Err(CliError::Config("gradcheck_trials must be positive".into()));
    }
    let seed = cfg.hyperparams.seed;
    let mut rows = primitive_checks(cfg.gradcheck_trials, seed)?;
    rows.push(full_model_check(&CareConfig::tiny(), seed)?);
    let all_passed = rows.iter().all(|r| r.passed);

    let mut table = Table::new("finite-difference gradient checks", &["check", "max rel error", "status"]);
    for r in &rows {
        let status = if r.passed { "pass" } else { "FAIL" };
        table.row(vec![r.name.clone(), format!("{:.3e}", r.max_relative_error), status.into()]);
    }
    let result = GradcheckResult {
        tolerance: TOLERANCE,
        all_passed,
        rows,
    };
    let report = Report::new("gradcheck", cfg, &result)?.with_table(table);
    let mut outcome = finish(report, "gradcheck", cfg.out_dir.as_deref().map(Outputs::new), force)?;
    outcome.passed = all_passed;
    Ok(outcome)
}
