//! Evaluation metrics for the three tasks: multi-label mAP with long-tail
//! segments, temporal grounding recall and IoU, pose PCK, and accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentThresholds {
    pub hi: u64,
    pub lo: u64,
}

impl Default for SegmentThresholds {
    fn default() -> Self {
        Self { hi: 500, lo: 100 }
    }
}

impl SegmentThresholds {
    pub fn new(hi: u64, lo: u64) -> Result<Self> {
        if !(hi > lo && lo > 0) {
            return Err(Error::Input(format!("segment thresholds need hi > lo > 0, got hi={hi} lo={lo}")));
        }
        Ok(Self { hi, lo })
    }
}

/// A time span in seconds with `0 <= start < end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    start: f64,
    end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && start >= 0.0 && start < end) {
            return Err(Error::Input(format!("invalid interval [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Scores of one evaluation, serialised with stable key order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub scores: BTreeMap<String, f64>,
    pub per_class: BTreeMap<String, f64>,
    pub params: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn new(task: &str) -> Self {
        Self {
            task: task.to_string(),
            ..Self::default()
        }
    }

    /// Every score and per-class entry lies in `[0, 1]`.
    pub fn is_proportional(&self) -> bool {
        self.scores.values().chain(self.per_class.values()).all(|v| (0.0..=1.0).contains(v))
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Input(format!("score {i} is not finite")));
    }
    Ok(())
}

/// Mean over positives of the precision at each positive's rank, ranking by
/// descending score with ties broken by ascending index.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Input(format!("{} scores for {} labels", scores.len(), positives.len())));
    }
    check_scores(scores)?;
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapOutcome {
    pub map: f64,
    /// `(class, AP)` for every evaluated class.
    pub per_class: Vec<(usize, f64)>,
    /// Classes of the subset without any positive item.
    pub skipped: Vec<usize>,
}

/// Mean AP over `subset` (all classes when `None`), skipping classes with no
/// positive item.
pub fn multilabel_map(scores: &[Vec<f64>], labels: &[Vec<bool>], subset: Option<&[usize]>) -> Result<MapOutcome> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} score rows for {} label rows", scores.len(), labels.len())));
    }
    let classes = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != classes) || labels.iter().any(|r| r.len() != classes) {
        return Err(Error::Input("score and label matrices must be rectangular with equal widths".into()));
    }
    let all: Vec<usize> = (0..classes).collect();
    let subset = subset.unwrap_or(&all);
    if let Some(&c) = subset.iter().find(|&&c| c >= classes) {
        return Err(Error::Input(format!("class {c} outside 0..{classes}")));
    }
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for &c in subset {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        match average_precision(&col, &pos) {
            Ok(ap) => per_class.push((c, ap)),
            Err(Error::UndefinedAp) => skipped.push(c),
            Err(e) => return Err(e),
        }
    }
    if per_class.is_empty() {
        return Err(Error::Input("no class in the subset has a positive item".into()));
    }
    let map = per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64;
    Ok(MapOutcome {
        map,
        per_class,
        skipped,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    pub head: Vec<usize>,
    pub middle: Vec<usize>,
    pub tail: Vec<usize>,
}

/// `head`: more than `hi` samples; `middle`: `lo..=hi`; `tail`: fewer than `lo`.
pub fn segment_classes(train_counts: &[u64], th: SegmentThresholds) -> Segments {
    let mut s = Segments::default();
    for (c, &n) in train_counts.iter().enumerate() {
        if n > th.hi {
            s.head.push(c);
        } else if n >= th.lo {
            s.middle.push(c);
        } else {
            s.tail.push(c);
        }
    }
    s
}

pub fn temporal_iou(pred: Interval, gt: Interval) -> f64 {
    let inter = (pred.end.min(gt.end) - pred.start.max(gt.start)).max(0.0);
    let union = pred.length() + gt.length() - inter;
    inter / union
}

/// Fraction of queries whose top `n` predictions include one with IoU
/// strictly above `mu`.
pub fn recall_at_n(ranked: &[Vec<Interval>], gts: &[Interval], n: usize, mu: f64) -> Result<f64> {
    if n < 1 {
        return Err(Error::Input("recall needs n >= 1".into()));
    }
    if ranked.len() != gts.len() || gts.is_empty() {
        return Err(Error::Input(format!("{} prediction lists for {} queries", ranked.len(), gts.len())));
    }
    if let Some(q) = ranked.iter().position(Vec::is_empty) {
        return Err(Error::Input(format!("query {q} has no predictions")));
    }
    let hits = ranked
        .iter()
        .zip(gts)
        .filter(|(preds, gt)| preds.iter().take(n).any(|p| temporal_iou(*p, **gt) > mu))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

pub fn mean_iou(top1: &[Interval], gts: &[Interval]) -> Result<f64> {
    if top1.len() != gts.len() || gts.is_empty() {
        return Err(Error::Input(format!("{} predictions for {} queries", top1.len(), gts.len())));
    }
    Ok(top1.iter().zip(gts).map(|(p, g)| temporal_iou(*p, *g)).sum::<f64>() / gts.len() as f64)
}

/// Numbers of correct and of visible keypoints in one image: a visible ground
/// truth keypoint is correct when the prediction lies within
/// `alpha * max(height, width)` of it, boundary included.
pub fn pck_counts(
    pred: &[(f64, f64)],
    gt: &[(f64, f64)],
    visible: &[bool],
    bbox_hw: (f64, f64),
    alpha: f64,
) -> Result<(usize, usize)> {
    if pred.len() != gt.len() || gt.len() != visible.len() {
        return Err(Error::Input(format!(
            "{} predicted, {} ground-truth keypoints, {} visibility flags",
            pred.len(),
            gt.len(),
            visible.len()
        )));
    }
    let (h, w) = bbox_hw;
    if !(h > 0.0 && w > 0.0 && h.is_finite() && w.is_finite()) {
        return Err(Error::Input(format!("bounding box extents must be positive, got {h}x{w}")));
    }
    let threshold = alpha * h.max(w);
    let mut correct = 0;
    let mut total = 0;
    for ((p, g), &v) in pred.iter().zip(gt).zip(visible) {
        if !v {
            continue;
        }
        total += 1;
        if (p.0 - g.0).hypot(p.1 - g.1) <= threshold {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::Input("no visible ground-truth keypoint".into()));
    }
    Ok((correct, total))
}

pub fn pck(pred: &[(f64, f64)], gt: &[(f64, f64)], visible: &[bool], bbox_hw: (f64, f64), alpha: f64) -> Result<f64> {
    let (c, t) = pck_counts(pred, gt, visible, bbox_hw, alpha)?;
    Ok(c as f64 / t as f64)
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Input(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64)
}
