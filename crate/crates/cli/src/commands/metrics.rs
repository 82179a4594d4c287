//! Scoring of prediction files against annotation files.
//!
//! Prediction formats:
//! - actions: CSV with header `clip_id,<class>...` and one row of scores per
//!   clip; the columns must be exactly the classes of the counts file.
//! - grounding: the grounding JSON Lines format; every line is one candidate
//!   span for its `(video_id, sentence)` query, earlier lines rank higher.
//! - pose: the pose JSON Lines format, one record per `image_id`; visibility
//!   and boxes are taken from the ground truth.

use std::collections::{BTreeMap, BTreeSet};

use care_core::annotations::{
    parse_actions, parse_grounding, parse_pose, read_file, AnimalClass, Diagnostic, GroundingRecord, PoseRecord,
};
use care_core::metrics::{
    mean_iou, multilabel_map, pck_counts, recall_at_n, segment_classes, Interval, MetricReport, SegmentThresholds,
};
use care_core::Error;
use serde_json::json;

use super::{finish, Outcome};
use crate::config::{MetricTask, RunConfig};
use crate::error::CliError;
use crate::output::{fmt4, Outputs, Report, Table};

pub(crate) fn mode(cfg: &RunConfig) -> care_core::annotations::Mode {
    if cfg.strict {
        care_core::annotations::Mode::Strict
    } else {
        care_core::annotations::Mode::Lenient
    }
}

fn note_diagnostics(report: &mut MetricReport, file: &str, diags: &[Diagnostic]) {
    for d in diags {
        report.notes.push(format!("{file} line {}: skipped, {}", d.line, d.reason));
    }
}

/// Ids present on only one side, each tagged with the side it came from.
fn unmatched<'a>(gt: impl IntoIterator<Item = &'a String>, pred: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    let gt: BTreeSet<&String> = gt.into_iter().collect();
    let pred: BTreeSet<&String> = pred.into_iter().collect();
    let mut out: Vec<String> = gt.difference(&pred).map(|id| format!("{id} (ground truth only)")).collect();
    out.extend(pred.difference(&gt).map(|id| format!("{id} (predictions only)")));
    out
}

fn csv_err(e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        reason: e.to_string(),
    }
    .into()
}

/// `(class, count)` rows in file order.
fn read_counts(bytes: &[u8]) -> Result<Vec<(String, u64)>, CliError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let header = r.headers().map_err(csv_err)?;
    if header.iter().collect::<Vec<_>>() != ["class", "count"] {
        return Err(Error::Parse {
            line: 1,
            reason: format!("counts header must be class,count, found {}", header.iter().collect::<Vec<_>>().join(",")),
        }
        .into());
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let bad = |reason: String| CliError::from(Error::Parse { line: i + 2, reason });
        let class = row.get(0).unwrap_or_default().to_string();
        let count: u64 = row
            .get(1)
            .unwrap_or_default()
            .parse()
            .map_err(|_| bad(format!("count {:?} is not a non-negative integer", row.get(1).unwrap_or_default())))?;
        if class.is_empty() || !seen.insert(class.clone()) {
            return Err(bad(format!("class {class:?} is empty or repeated")));
        }
        out.push((class, count));
    }
    Ok(out)
}

/// Score rows keyed by clip id, columns reordered to `classes`.
fn read_scores(bytes: &[u8], classes: &[String]) -> Result<BTreeMap<String, Vec<f64>>, CliError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("clip_id") {
        return Err(Error::Parse {
            line: 1,
            reason: "prediction header must start with clip_id".into(),
        }
        .into());
    }
    let columns: Vec<&String> = header[1..].iter().collect();
    let wanted: BTreeSet<&String> = classes.iter().collect();
    let have: BTreeSet<&String> = columns.iter().copied().collect();
    if wanted != have || have.len() != columns.len() {
        let missing: Vec<&str> = wanted.difference(&have).map(|s| s.as_str()).collect();
        let extra: Vec<&str> = have.difference(&wanted).map(|s| s.as_str()).collect();
        return Err(Error::Parse {
            line: 1,
            reason: format!(
                "prediction columns must be the counts classes once each (missing [{}], extra [{}])",
                missing.join(", "),
                extra.join(", ")
            ),
        }
        .into());
    }
    let position: Vec<usize> = classes.iter().map(|c| columns.iter().position(|h| *h == c).expect("checked")).collect();
    let mut out = BTreeMap::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let bad = |reason: String| CliError::from(Error::Parse { line: i + 2, reason });
        let id = row.get(0).unwrap_or_default().to_string();
        let values: Vec<f64> = row
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("scores must be finite numbers".into()))?;
        let ordered = position.iter().map(|&p| values[p]).collect();
        if out.insert(id.clone(), ordered).is_some() {
            return Err(bad(format!("clip {id} listed twice")));
        }
    }
    Ok(out)
}

fn actions(cfg: &RunConfig, report: &mut MetricReport, table: &mut Table) -> Result<(), CliError> {
    let counts = read_counts(&read_file(cfg.require(&cfg.counts, "counts")?)?)?;
    let classes: Vec<String> = counts.iter().map(|(c, _)| c.clone()).collect();
    let vocabulary: BTreeSet<String> = classes.iter().cloned().collect();
    let gt = parse_actions(&read_file(cfg.require(&cfg.gt, "gt")?)?, Some(&vocabulary), mode(cfg))?;
    note_diagnostics(report, "gt", &gt.diagnostics);
    let scores = read_scores(&read_file(cfg.require(&cfg.pred, "pred")?)?, &classes)?;
    let missing = unmatched(gt.records.iter().map(|r| &r.clip_id), scores.keys());
    if !missing.is_empty() {
        return Err(CliError::Unmatched(missing));
    }
    let score_rows: Vec<Vec<f64>> = gt.records.iter().map(|r| scores[&r.clip_id].clone()).collect();
    let label_rows: Vec<Vec<bool>> = gt.records.iter().map(|r| classes.iter().map(|c| r.labels.contains(c)).collect()).collect();

    let th = SegmentThresholds::new(cfg.head_threshold, cfg.tail_threshold)?;
    let counts_only: Vec<u64> = counts.iter().map(|(_, n)| *n).collect();
    let seg = segment_classes(&counts_only, th);
    let overall = multilabel_map(&score_rows, &label_rows, None)?;
    report.scores.insert("map".into(), overall.map);
    table.row(vec!["mAP overall".into(), fmt4(overall.map), overall.per_class.len().to_string()]);
    for (c, ap) in &overall.per_class {
        report.per_class.insert(classes[*c].clone(), *ap);
    }
    for c in &overall.skipped {
        report.notes.push(format!("class {} has no positive clip; excluded from every mAP", classes[*c]));
    }
    for (name, subset) in [("head", &seg.head), ("middle", &seg.middle), ("tail", &seg.tail)] {
        let evaluable: Vec<usize> = subset.iter().copied().filter(|c| !overall.skipped.contains(c)).collect();
        if evaluable.is_empty() {
            report.notes.push(format!("segment {name} has no evaluable class; map_{name} omitted"));
            table.row(vec![format!("mAP {name}"), "-".into(), "0".into()]);
            continue;
        }
        let m = multilabel_map(&score_rows, &label_rows, Some(&evaluable))?;
        report.scores.insert(format!("map_{name}"), m.map);
        table.row(vec![format!("mAP {name}"), fmt4(m.map), m.per_class.len().to_string()]);
    }
    report.params.insert("head_threshold".into(), json!(th.hi));
    report.params.insert("tail_threshold".into(), json!(th.lo));
    report.params.insert("segments".into(), json!({"head": seg.head.len(), "middle": seg.middle.len(), "tail": seg.tail.len()}));
    Ok(())
}

fn query_key(r: &GroundingRecord) -> String {
    format!("{} / {}", r.video_id, r.sentence)
}

fn grounding(cfg: &RunConfig, report: &mut MetricReport, table: &mut Table) -> Result<(), CliError> {
    let gt = parse_grounding(&read_file(cfg.require(&cfg.gt, "gt")?)?, mode(cfg))?;
    let pred = parse_grounding(&read_file(cfg.require(&cfg.pred, "pred")?)?, mode(cfg))?;
    note_diagnostics(report, "gt", &gt.diagnostics);
    note_diagnostics(report, "pred", &pred.diagnostics);
    let mut queries: BTreeMap<String, Interval> = BTreeMap::new();
    for r in &gt.records {
        if queries.insert(query_key(r), r.span()).is_some() {
            return Err(Error::Input(format!("ground truth lists query {:?} twice", query_key(r))).into());
        }
    }
    let mut ranked: BTreeMap<String, Vec<Interval>> = BTreeMap::new();
    for r in &pred.records {
        ranked.entry(query_key(r)).or_default().push(r.span());
    }
    let missing = unmatched(queries.keys(), ranked.keys());
    if !missing.is_empty() {
        return Err(CliError::Unmatched(missing));
    }
    let gts: Vec<Interval> = queries.values().copied().collect();
    let lists: Vec<Vec<Interval>> = queries.keys().map(|k| ranked[k].clone()).collect();
    for &mu in &cfg.iou_thresholds {
        let r = recall_at_n(&lists, &gts, cfg.recall_n, mu)?;
        let name = format!("R@{},IoU={mu}", cfg.recall_n);
        table.row(vec![name.clone(), fmt4(r), gts.len().to_string()]);
        report.scores.insert(name, r);
    }
    let top1: Vec<Interval> = lists.iter().map(|l| l[0]).collect();
    let m = mean_iou(&top1, &gts)?;
    table.row(vec!["mIoU".into(), fmt4(m), gts.len().to_string()]);
    report.scores.insert("mIoU".into(), m);
    report.params.insert("recall_n".into(), json!(cfg.recall_n));
    report.params.insert("iou_thresholds".into(), json!(cfg.iou_thresholds));
    Ok(())
}

fn by_image(records: &[PoseRecord], file: &str) -> Result<BTreeMap<String, PoseRecord>, CliError> {
    let mut out = BTreeMap::new();
    for r in records {
        if out.insert(r.image_id.clone(), r.clone()).is_some() {
            return Err(Error::Input(format!("{file} lists image {} twice", r.image_id)).into());
        }
    }
    Ok(out)
}

fn pose(cfg: &RunConfig, report: &mut MetricReport, table: &mut Table) -> Result<(), CliError> {
    let gt = parse_pose(&read_file(cfg.require(&cfg.gt, "gt")?)?, None, mode(cfg))?;
    let pred = parse_pose(&read_file(cfg.require(&cfg.pred, "pred")?)?, None, mode(cfg))?;
    note_diagnostics(report, "gt", &gt.diagnostics);
    note_diagnostics(report, "pred", &pred.diagnostics);
    let (gt, pred) = (by_image(&gt.records, "ground truth")?, by_image(&pred.records, "predictions")?);
    let missing = unmatched(gt.keys(), pred.keys());
    if !missing.is_empty() {
        return Err(CliError::Unmatched(missing));
    }
    let mut per: BTreeMap<AnimalClass, (usize, usize)> = BTreeMap::new();
    for (id, g) in &gt {
        let (gt_pts, visible) = g.points();
        if !visible.iter().any(|&v| v) {
            report.notes.push(format!("image {id} has no visible keypoint; not scored"));
            continue;
        }
        let (pred_pts, _) = pred[id].points();
        let hw = (g.bbox.height.to_f64(), g.bbox.width.to_f64());
        let (c, t) = pck_counts(&pred_pts, &gt_pts, &visible, hw, cfg.pck_alpha)?;
        let e = per.entry(g.animal_class).or_default();
        e.0 += c;
        e.1 += t;
    }
    let (c, t) = per.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if t == 0 {
        return Err(Error::Input("no visible ground-truth keypoint in any image".into()).into());
    }
    let name = format!("PCK@{}", cfg.pck_alpha);
    report.scores.insert(name.clone(), c as f64 / t as f64);
    table.row(vec![format!("{name} overall"), fmt4(c as f64 / t as f64), t.to_string()]);
    for (class, (c, t)) in &per {
        report.per_class.insert(class.name().into(), *c as f64 / *t as f64);
        table.row(vec![format!("{name} {class}"), fmt4(*c as f64 / *t as f64), t.to_string()]);
    }
    report.params.insert("pck_alpha".into(), json!(cfg.pck_alpha));
    Ok(())
}

pub fn metrics(cfg: &RunConfig, force: bool) -> Result<Outcome, CliError> {
    let task = cfg.task.ok_or_else(|| CliError::Config("task is required (--task actions|grounding|pose)".into()))?;
    let mut report = MetricReport::new(task.name());
    let last = match task {
        MetricTask::Actions => "classes",
        MetricTask::Grounding => "queries",
        MetricTask::Pose => "keypoints",
    };
    let mut table = Table::new(&format!("{} metrics", task.name()), &["metric", "value", last]);
    match task {
        MetricTask::Actions => actions(cfg, &mut report, &mut table)?,
        MetricTask::Grounding => grounding(cfg, &mut report, &mut table)?,
        MetricTask::Pose => pose(cfg, &mut report, &mut table)?,
    }
    let mut out = Report::new("metrics", cfg, &report)?.with_table(table);
    if !report.notes.is_empty() {
        let mut notes = Table::new("notes", &["note"]);
        for n in &report.notes {
            notes.row(vec![n.clone()]);
        }
        out = out.with_table(notes);
    }
    finish(out, &format!("metrics_{}", task.name()), cfg.out_dir.as_deref().map(Outputs::new), force)
}
