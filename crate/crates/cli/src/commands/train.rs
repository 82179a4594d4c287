use care_core::model::CareConfig;
use care_core::synth::TaskSpec;
use care_core::train::{train as run_training, Checkpoint, EpochRecord};
use serde::Serialize;

use super::{finish, load_dataset, Outcome};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{fmt4, short, Outputs, Report, Table};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.json";

#[derive(Serialize)]
struct TrainResult<'a> {
    dataset: &'a TaskSpec,
    model: &'a CareConfig,
    variant: &'static str,
    checkpoints: Vec<String>,
    epochs: &'a [EpochRecord],
}

fn opt4(v: Option<f64>) -> String {
    v.map_or("-".into(), fmt4)
}

/// Trains on the seen domains of `data_dir`; writes the final checkpoint,
/// any intermediate ones, and the training log into `out_dir`.
pub fn train(cfg: &RunConfig, force: bool) -> Result<Outcome, CliError> {
    let data = cfg.require(&cfg.data_dir, "data_dir")?;
    let out = cfg.require(&cfg.out_dir, "out_dir")?;
    let (spec, seen, _) = load_dataset(data)?;
    let model = cfg.care_config(&spec, cfg.variant);
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let (_, log) = run_training(&model, &cfg.hyperparams, &seen, cfg.variant, |c| {
        checkpoints.push(c.clone());
        Ok(())
    })?;

    let mut outputs = Outputs::new(out);
    let last = checkpoints.len() - 1;
    let mut names = Vec::new();
    for (i, c) in checkpoints.iter().enumerate() {
        let name = if i == last {
            CHECKPOINT_FILE.to_string()
        } else {
            format!("checkpoint-epoch-{}.bin", c.epoch)
        };
        outputs.add(&name, c.to_bytes());
        names.push(name);
    }
    outputs.add(LOG_FILE, log.to_json().into_bytes());

    let mut table = Table::new(
        &format!("training ({})", cfg.variant.name()),
        &["epoch", "base loss", "meta-train", "meta-test", "lr backbone", "lr other"],
    );
    for e in &log.epochs {
        table.row(vec![
            e.epoch.to_string(),
            fmt4(e.mean_base_loss()),
            opt4(e.meta_train_loss),
            opt4(e.meta_test_loss),
            short(e.lr_backbone),
            short(e.lr_other),
        ]);
    }
    let result = TrainResult {
        dataset: &spec,
        model: &model,
        variant: cfg.variant.name(),
        checkpoints: names,
        epochs: &log.epochs,
    };
    let report = Report::new("train", cfg, &result)?.with_table(table);
    finish(report, "train", Some(outputs), force)
}
