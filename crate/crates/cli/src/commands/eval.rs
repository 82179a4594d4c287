use care_core::model::config_mismatches;
use care_core::train::Checkpoint;
use serde::Serialize;

use super::{finish, load_dataset, unseen_accuracy, Outcome, UnseenAccuracy};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{fmt4, Outputs, Report, Table};

#[derive(Serialize)]
struct EvalResult {
    variant: &'static str,
    checkpoint_epoch: usize,
    chance: f64,
    #[serde(flatten)]
    scores: UnseenAccuracy,
}

/// Accuracy of a checkpoint's unseen-domain path on every unseen sample.
pub fn eval_unseen(cfg: &RunConfig, force: bool) -> Result<Outcome, CliError> {
    let data = cfg.require(&cfg.data_dir, "data_dir")?;
    let path = cfg.require(&cfg.checkpoint, "checkpoint")?;
    let (spec, _, unseen) = load_dataset(data)?;
    let ckpt = Checkpoint::load(path)?;
    let wanted = cfg.care_config(&spec, cfg.variant);
    let mut problems = config_mismatches(ckpt.params.config(), &wanted);
    if ckpt.variant != cfg.variant {
        problems.push(format!("variant: checkpoint {}, config {}", ckpt.variant.name(), cfg.variant.name()));
    }
    if !problems.is_empty() {
        return Err(care_core::Error::Compatibility(problems).into());
    }
    let scores = unseen_accuracy(&ckpt.params, &unseen, cfg.variant)?;

    let mut table = Table::new(&format!("unseen accuracy ({})", cfg.variant.name()), &["domain", "accuracy"]);
    for (d, a) in &scores.per_domain {
        table.row(vec![d.clone(), fmt4(*a)]);
    }
    table.row(vec!["overall".into(), fmt4(scores.accuracy)]);
    let result = EvalResult {
        variant: cfg.variant.name(),
        checkpoint_epoch: ckpt.epoch,
        chance: 1.0 / spec.classes as f64,
        scores,
    };
    let report = Report::new("eval-unseen", cfg, &result)?.with_table(table);
    finish(report, "eval_unseen", cfg.out_dir.as_deref().map(Outputs::new), force)
}
