use care_core::model::Variant;
use care_core::train::{train, Hyperparams};
use rayon::prelude::*;
use serde::Serialize;

use super::{finish, load_dataset, unseen_accuracy, Outcome};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{fmt4, Outputs, Report, Table};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: &'static str,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
}

#[derive(Serialize)]
struct AblateResult {
    chance: f64,
    rows: Vec<VariantRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and scores every variant on seeds `seed..seed + seeds`. Runs are
/// independent and collected in (variant, seed) order.
pub fn ablate(cfg: &RunConfig, force: bool) -> Result<Outcome, CliError> {
    let data = cfg.require(&cfg.data_dir, "data_dir")?;
    let out = cfg.require(&cfg.out_dir, "out_dir")?;
    if cfg.seeds == 0 {
        return Err(CliError::Config("seeds must be positive".into()));
    }
    cfg.hyperparams.validate()?;
    let (spec, seen, unseen) = load_dataset(data)?;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| cfg.hyperparams.seed + i).collect();
    let runs: Vec<(Variant, u64)> = Variant::ALL.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let accuracies: Vec<f64> = runs
        .par_iter()
        .map(|&(variant, seed)| {
            let hp = Hyperparams {
                seed,
                ..cfg.hyperparams.clone()
            };
            let model = cfg.care_config(&spec, variant);
            let (params, _) = train(&model, &hp, &seen, variant, |_| Ok(()))?;
            Ok(unseen_accuracy(&params, &unseen, variant)?.accuracy)
        })
        .collect::<Result<_, CliError>>()?;

    let rows: Vec<VariantRow> = Variant::ALL
        .iter()
        .zip(accuracies.chunks(seeds.len()))
        .map(|(v, accs)| {
            let (mean, std) = mean_std(accs);
            VariantRow {
                variant: v.name(),
                mean,
                std,
                seeds: seeds.clone(),
                accuracies: accs.to_vec(),
            }
        })
        .collect();
    let mut table = Table::new(&format!("unseen accuracy over {} seeds", seeds.len()), &["variant", "mean", "std", "per seed"]);
    for r in &rows {
        let per: Vec<String> = r.accuracies.iter().map(|&a| fmt4(a)).collect();
        table.row(vec![r.variant.into(), fmt4(r.mean), fmt4(r.std), per.join(" ")]);
    }
    let result = AblateResult {
        chance: 1.0 / spec.classes as f64,
        rows,
    };
    let report = Report::new("ablate", cfg, &result)?.with_table(table);
    finish(report, "ablate", Some(Outputs::new(out)), force)
}
