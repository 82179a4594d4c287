use std::path::Path;

use care_core::synth::{domain_dir_name, export_dataset, make_benchmark, signal_audit, AuditReport, DomainDataset};
use serde::Serialize;

use super::Outcome;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{fmt4, Report, Table};

#[derive(Serialize)]
struct DomainRow {
    dir: String,
    designation: &'static str,
    samples: usize,
}

#[derive(Serialize)]
struct SynthResult {
    domains: Vec<DomainRow>,
    samples: usize,
    chance: f64,
    audit: AuditReport,
}

fn rows<'a>(set: &'a DomainDataset, designation: &'static str) -> impl Iterator<Item = DomainRow> + 'a {
    set.domains.iter().map(move |d| DomainRow {
        dir: domain_dir_name(d.domain),
        designation,
        samples: d.samples.len(),
    })
}

/// Exports the benchmark, its index and a signal audit into `data_dir`.
/// The tree is assembled next to the target and moved into place at the end.
pub fn synth_gen(cfg: &RunConfig, force: bool) -> Result<Outcome, CliError> {
    let root = cfg.require(&cfg.data_dir, "data_dir")?;
    let spec = &cfg.task_spec;
    spec.validate()?;
    if root.exists() && !force {
        return Err(CliError::Collision(root.to_path_buf()));
    }
    let (seen, unseen) = make_benchmark(spec)?;
    let audit = signal_audit(spec, cfg.audit_probe)?;

    let parent = match root.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent)?;
    let staging = tempfile::Builder::new().prefix(".care-lab-").tempdir_in(parent)?;
    export_dataset(staging.path(), spec, &[&seen, &unseen])?;

    let domains: Vec<DomainRow> = rows(&seen, "seen").chain(rows(&unseen, "unseen")).collect();
    let mut table = Table::new("domains", &["dir", "designation", "samples"]);
    for d in &domains {
        table.row(vec![d.dir.clone(), d.designation.into(), d.samples.to_string()]);
    }
    let chance = 1.0 / spec.classes as f64;
    let mut audit_table = Table::new("signal audit (seen domains, linear probe)", &["measure", "value"]);
    audit_table.row(vec!["class separability".into(), fmt4(audit.class_separability)]);
    audit_table.row(vec!["domain separability".into(), fmt4(audit.domain_separability)]);
    audit_table.row(vec!["class chance".into(), fmt4(chance)]);
    let result = SynthResult {
        samples: seen.len() + unseen.len(),
        domains,
        chance,
        audit,
    };
    let report = Report::new("synth-gen", cfg, &result)?.with_table(table).with_table(audit_table);
    std::fs::write(staging.path().join("audit.json"), report.to_json())?;
    std::fs::write(staging.path().join("audit.txt"), report.to_text())?;

    if root.exists() {
        if root.is_dir() {
            std::fs::remove_dir_all(root)?;
        } else {
            std::fs::remove_file(root)?;
        }
    }
    let staged = staging.keep();
    if let Err(e) = std::fs::rename(&staged, root) {
        let _ = std::fs::remove_dir_all(&staged);
        return Err(e.into());
    }
    Ok(Outcome {
        report,
        written: vec![root.to_path_buf()],
        passed: true,
    })
}
