mod ablate;
mod eval;
mod gradcheck;
mod metrics;
mod split;
mod synth_gen;
mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use care_core::metrics::accuracy;
use care_core::model::{CareParams, Variant};
use care_core::synth::{import_dataset, DomainDataset, Sample, TaskSpec, INDEX_FILE};
use care_core::train::{argmax, predict_unseen};
use serde::Serialize;

pub use ablate::ablate;
pub use eval::eval_unseen;
pub use gradcheck::gradcheck;
pub use metrics::metrics;
pub use split::split;
pub use synth_gen::synth_gen;
pub use train::train;

use crate::error::CliError;
use crate::output::{Outputs, Report};

/// What a command produced.
#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    /// Files committed to disk, or empty when the report went to stdout.
    pub written: Vec<PathBuf>,
    /// False when the command ran to completion but a check failed.
    pub passed: bool,
}

/// Commits `outputs` plus the report under `stem`, or keeps the report in
/// memory when there is no output directory.
fn finish(report: Report, stem: &str, outputs: Option<Outputs>, force: bool) -> Result<Outcome, CliError> {
    let written = match outputs {
        Some(mut o) => {
            o.add_report(stem, &report);
            o.commit(force)?
        }
        None => Vec::new(),
    };
    Ok(Outcome {
        report,
        written,
        passed: true,
    })
}

fn load_dataset(root: &Path) -> Result<(TaskSpec, DomainDataset, DomainDataset), CliError> {
    if !root.join(INDEX_FILE).is_file() {
        return Err(care_core::Error::Input(format!("no dataset at {} (missing {INDEX_FILE})", root.display())).into());
    }
    Ok(import_dataset(root)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnseenAccuracy {
    pub accuracy: f64,
    pub samples: usize,
    /// Keyed by domain directory name.
    pub per_domain: BTreeMap<String, f64>,
}

fn unseen_accuracy(params: &CareParams, unseen: &DomainDataset, variant: Variant) -> Result<UnseenAccuracy, CliError> {
    let samples: Vec<&Sample> = unseen.samples().collect();
    let logits = predict_unseen(params, &samples, variant)?;
    let pred: Vec<usize> = logits.iter().map(argmax).collect();
    let gt: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut per_domain = BTreeMap::new();
    for d in &unseen.domains {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].domain == d.domain).collect();
        let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
        let g: Vec<usize> = idx.iter().map(|&i| gt[i]).collect();
        per_domain.insert(care_core::synth::domain_dir_name(d.domain), accuracy(&p, &g)?);
    }
    Ok(UnseenAccuracy {
        accuracy: accuracy(&pred, &gt)?,
        samples: samples.len(),
        per_domain,
    })
}
