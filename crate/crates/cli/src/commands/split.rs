use care_core::annotations::{
    balance_summary, parse_actions, read_file, serialize_actions, stratified_split, ActionClipRecord, ClassBalance, SplitTag,
};
use serde::Serialize;

use super::metrics::mode;
use super::{finish, Outcome};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{fmt4, Outputs, Report, Table};

#[derive(Serialize)]
struct SplitResult {
    records: usize,
    train: usize,
    test: usize,
    max_deviation: f64,
    classes: Vec<ClassBalance>,
}

/// Stratified train/test split of an action annotation file.
pub fn split(cfg: &RunConfig, force: bool) -> Result<Outcome, CliError> {
    let input = cfg.require(&cfg.input, "input")?;
    let out = cfg.require(&cfg.out_dir, "out_dir")?;
    let parsed = parse_actions(&read_file(input)?, None, mode(cfg))?;
    let records = parsed.records;
    let assignment = stratified_split(&records, cfg.split_ratio, cfg.hyperparams.seed)?;
    let pick = |tag| -> Vec<ActionClipRecord> { assignment.indices(tag).into_iter().map(|i| records[i].clone()).collect() };
    let (train, test) = (pick(SplitTag::Train), pick(SplitTag::Test));
    let mut outputs = Outputs::new(out);
    outputs.add("train.csv", serialize_actions(&train)?);
    outputs.add("test.csv", serialize_actions(&test)?);

    let classes = balance_summary(&records, &assignment);
    let mut table = Table::new(
        &format!("per-class balance (ratio {})", cfg.split_ratio),
        &["class", "total", "train", "test", "deviation"],
    );
    for c in &classes {
        table.row(vec![c.class.clone(), c.total.to_string(), c.train.to_string(), c.test.to_string(), fmt4(c.deviation)]);
    }
    let result = SplitResult {
        records: records.len(),
        train: train.len(),
        test: test.len(),
        max_deviation: classes.iter().map(|c| c.deviation).fold(0.0, f64::max),
        classes,
    };
    let report = Report::new("split", cfg, &result)?.with_table(table);
    finish(report, "split", Some(outputs), force)
}
