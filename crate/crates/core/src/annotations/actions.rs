use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{check_id, utf8, Collector, Mode, Parsed};
use crate::error::{Error, Result};

const HEADER: [&str; 2] = ["clip_id", "labels"];

/// One clip of the multi-label action task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionClipRecord {
    pub clip_id: String,
    pub labels: BTreeSet<String>,
}

impl ActionClipRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        check_id(&self.clip_id, "clip_id")?;
        if self.labels.is_empty() {
            return Err(format!("clip {} has no labels", self.clip_id));
        }
        for l in &self.labels {
            check_id(l, "label")?;
            if l.contains(';') {
                return Err(format!("label {l:?} contains ';'"));
            }
        }
        Ok(())
    }
}

fn parse_row(row: &csv::StringRecord, vocabulary: Option<&BTreeSet<String>>) -> std::result::Result<ActionClipRecord, String> {
    if row.len() != 2 {
        return Err(format!("expected 2 fields (clip_id,labels), found {}", row.len()));
    }
    let clip_id = row[0].trim().to_string();
    let mut labels = BTreeSet::new();
    for part in row[1].split(';') {
        let l = part.trim();
        if l.is_empty() {
            return Err(format!("empty label in {:?}", &row[1]));
        }
        labels.insert(l.to_string());
    }
    let rec = ActionClipRecord { clip_id, labels };
    rec.validate()?;
    if let Some(vocab) = vocabulary {
        let unknown: Vec<&str> = rec.labels.iter().filter(|l| !vocab.contains(*l)).map(String::as_str).collect();
        if !unknown.is_empty() {
            return Err(format!("labels outside the vocabulary: {}", unknown.join(", ")));
        }
    }
    Ok(rec)
}

/// Parses the `clip_id,labels` CSV, labels joined by `;`. The first non-blank
/// line is the header; `clip_id` must be unique.
pub fn parse_actions(bytes: &[u8], vocabulary: Option<&BTreeSet<String>>, mode: Mode) -> Result<Parsed<ActionClipRecord>> {
    let text = utf8(bytes)?;
    let mut out = Collector::new(mode);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut first_seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut header_done = false;
    for row in reader.records() {
        let (line, outcome) = match row {
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                (line, Err(format!("unreadable CSV row: {e}")))
            }
            Ok(row) => {
                let line = row.position().map_or(0, |p| p.line() as usize);
                if !header_done {
                    header_done = true;
                    let fields: Vec<&str> = row.iter().map(str::trim).collect();
                    if fields != HEADER {
                        return Err(Error::Parse {
                            line,
                            reason: format!("expected header clip_id,labels, found {}", fields.join(",")),
                        });
                    }
                    continue;
                }
                let outcome = parse_row(&row, vocabulary).and_then(|rec| match first_seen.get(&rec.clip_id) {
                    Some(&prev) => Err(format!("duplicate clip_id {} (first on line {prev})", rec.clip_id)),
                    None => {
                        first_seen.insert(rec.clip_id.clone(), line);
                        Ok(rec)
                    }
                });
                (line, outcome)
            }
        };
        out.push(line, outcome)?;
    }
    Ok(out.parsed)
}

/// Canonical CSV: header, then one row per record in order with labels
/// sorted; fields are quoted only when needed.
pub fn serialize_actions(records: &[ActionClipRecord]) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| Error::Input(format!("record {i}: {e}")))?;
        if !seen.insert(&r.clip_id) {
            return Err(Error::Input(format!("record {i}: duplicate clip_id {}", r.clip_id)));
        }
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let io = |e: csv::Error| Error::Input(format!("CSV encoding failed: {e}"));
    w.write_record(HEADER).map_err(io)?;
    for r in records {
        let labels: Vec<&str> = r.labels.iter().map(String::as_str).collect();
        w.write_record([r.clip_id.as_str(), &labels.join(";")]).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Input(format!("CSV encoding failed: {e}")))
}
