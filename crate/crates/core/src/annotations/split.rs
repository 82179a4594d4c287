use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ActionClipRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// One tag per record, in record order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub tags: Vec<SplitTag>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.tags.iter().enumerate().filter(|(_, &t)| t == tag).map(|(i, _)| i).collect()
    }
}

const TRAIN: usize = 0;
const TEST: usize = 1;

/// Iterative multi-label stratification. Per-class targets are
/// `round(ratio * count)`, clamped so both sides get a record. The record
/// holding the rarest still-unassigned label goes to the side with the
/// larger remaining demand for that label; ties go to the side with more
/// remaining capacity, then to a seeded coin.
///
/// When that leaves a class more than one record off `ratio * count`, or
/// without a test record, a seeded annealing pass over single-record moves
/// repairs the assignment where it can.
pub fn stratified_split(records: &[ActionClipRecord], ratio: f64, seed: u64) -> Result<SplitAssignment> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Input(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        if r.labels.is_empty() {
            return Err(Error::Input(format!("clip {} has no labels", r.clip_id)));
        }
        for l in &r.labels {
            *counts.entry(l).or_default() += 1;
        }
    }
    let scarce: Vec<String> = counts.iter().filter(|(_, &n)| n < 2).map(|(l, _)| l.to_string()).collect();
    if !scarce.is_empty() {
        return Err(Error::Stratification(scarce));
    }
    let labels: Vec<&str> = counts.keys().copied().collect();
    let label_index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let rows: Vec<Vec<usize>> = records.iter().map(|r| r.labels.iter().map(|l| label_index[l.as_str()]).collect()).collect();

    let mut demand = [vec![0i64; labels.len()], vec![0i64; labels.len()]];
    for (j, l) in labels.iter().enumerate() {
        let n = counts[l] as i64;
        let train = ((ratio * n as f64).round() as i64).clamp(1, n - 1);
        demand[TRAIN][j] = train;
        demand[TEST][j] = n - train;
    }
    let n = records.len() as i64;
    let train_capacity = (ratio * n as f64).round() as i64;
    let mut capacity = [train_capacity, n - train_capacity];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let mut unassigned = vec![0usize; labels.len()];
    for row in &rows {
        for &j in row {
            unassigned[j] += 1;
        }
    }
    let mut tags: Vec<Option<SplitTag>> = vec![None; records.len()];
    while let Some(label) = (0..labels.len()).filter(|&j| unassigned[j] > 0).min_by_key(|&j| unassigned[j]) {
        for &i in &order {
            if tags[i].is_some() || !rows[i].contains(&label) {
                continue;
            }
            let side = match demand[TRAIN][label].cmp(&demand[TEST][label]) {
                std::cmp::Ordering::Greater => TRAIN,
                std::cmp::Ordering::Less => TEST,
                std::cmp::Ordering::Equal => match capacity[TRAIN].cmp(&capacity[TEST]) {
                    std::cmp::Ordering::Greater => TRAIN,
                    std::cmp::Ordering::Less => TEST,
                    std::cmp::Ordering::Equal => {
                        if rng.random_bool(0.5) {
                            TRAIN
                        } else {
                            TEST
                        }
                    }
                },
            };
            tags[i] = Some(if side == TRAIN { SplitTag::Train } else { SplitTag::Test });
            capacity[side] -= 1;
            for &j in &rows[i] {
                demand[side][j] -= 1;
                unassigned[j] -= 1;
            }
        }
    }
    let mut train: Vec<bool> = tags.into_iter().map(|t| t == Some(SplitTag::Train)).collect();
    anneal(&rows, &counts.values().copied().collect::<Vec<_>>(), ratio, &mut train, &mut rng);
    Ok(SplitAssignment {
        tags: train.into_iter().map(|t| if t { SplitTag::Train } else { SplitTag::Test }).collect(),
        ratio,
        seed,
    })
}

const ANNEAL_STEPS: usize = 20_000;

fn class_penalty(train: usize, total: usize, ratio: f64) -> f64 {
    let d = (train as f64 - ratio * total as f64).abs();
    (d - 1.0).max(0.0) + if train == total { 1.0 } else { 0.0 } + 0.01 * d * d
}

fn violated(train: &[usize], totals: &[usize], ratio: f64) -> bool {
    train
        .iter()
        .zip(totals)
        .any(|(&t, &n)| t == n || (t as f64 - ratio * n as f64).abs() > 1.0 + 1e-9)
}

fn anneal(rows: &[Vec<usize>], totals: &[usize], ratio: f64, train: &mut [bool], rng: &mut ChaCha8Rng) {
    let mut per_class = vec![0usize; totals.len()];
    for (row, &t) in rows.iter().zip(train.iter()) {
        if t {
            row.iter().for_each(|&j| per_class[j] += 1);
        }
    }
    if !violated(&per_class, totals, ratio) {
        return;
    }
    let n = rows.len() as f64;
    let global = |k: usize| 0.01 * (k as f64 - ratio * n).powi(2);
    let mut in_train = train.iter().filter(|&&t| t).count();
    let mut energy: f64 = per_class.iter().zip(totals).map(|(&t, &c)| class_penalty(t, c, ratio)).sum::<f64>() + global(in_train);
    let mut best = (energy, train.to_vec());
    for step in 0..ANNEAL_STEPS {
        let temperature = 0.6 * (1.0 - step as f64 / ANNEAL_STEPS as f64) + 0.02;
        let i = rng.random_range(0..rows.len());
        let to_train = !train[i];
        let moved = |t: usize| if to_train { t + 1 } else { t - 1 };
        let delta: f64 = rows[i]
            .iter()
            .map(|&j| class_penalty(moved(per_class[j]), totals[j], ratio) - class_penalty(per_class[j], totals[j], ratio))
            .sum::<f64>()
            + global(moved(in_train))
            - global(in_train);
        if delta <= 0.0 || rng.random::<f64>() < (-delta / temperature).exp() {
            rows[i].iter().for_each(|&j| per_class[j] = moved(per_class[j]));
            in_train = moved(in_train);
            train[i] = to_train;
            energy += delta;
            if energy < best.0 - 1e-12 {
                best = (energy, train.to_vec());
                if !violated(&per_class, totals, ratio) {
                    return;
                }
            }
        }
    }
    train.copy_from_slice(&best.1);
}

/// How far one class's split landed from the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub class: String,
    pub total: usize,
    pub train: usize,
    pub test: usize,
    /// `|train - ratio * total|`, in records.
    pub deviation: f64,
}

pub fn balance_summary(records: &[ActionClipRecord], split: &SplitAssignment) -> Vec<ClassBalance> {
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (r, t) in records.iter().zip(&split.tags) {
        for l in &r.labels {
            let e = per.entry(l).or_default();
            match t {
                SplitTag::Train => e.0 += 1,
                SplitTag::Test => e.1 += 1,
            }
        }
    }
    per.into_iter()
        .map(|(class, (train, test))| {
            let total = train + test;
            ClassBalance {
                class: class.to_string(),
                total,
                train,
                test,
                deviation: (train as f64 - split.ratio * total as f64).abs(),
            }
        })
        .collect()
}
