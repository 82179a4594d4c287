use serde::{Deserialize, Serialize};

use super::{check_id, data_lines, fixed, json_str, utf8, Collector, Fixed3, Mode, Parsed};
use crate::error::{Error, Result};
use crate::metrics::Interval;

/// One sentence query of the temporal grounding task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub video_id: String,
    pub sentence: String,
    pub start_s: Fixed3,
    pub end_s: Fixed3,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    video_id: String,
    sentence: String,
    start_s: f64,
    end_s: f64,
}

impl GroundingRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        check_id(&self.video_id, "video_id")?;
        if self.sentence.trim().is_empty() {
            return Err("empty sentence".into());
        }
        if self.start_s < Fixed3::default() || self.start_s >= self.end_s {
            return Err(format!("invalid span: start {} must be >= 0 and before end {}", self.start_s, self.end_s));
        }
        Ok(())
    }

    pub fn span(&self) -> Interval {
        Interval::new(self.start_s.to_f64(), self.end_s.to_f64()).expect("validated span")
    }
}

fn parse_line(line: &str) -> std::result::Result<GroundingRecord, String> {
    let raw: Raw = serde_json::from_str(line).map_err(|e| format!("bad JSON record: {e}"))?;
    let rec = GroundingRecord {
        video_id: raw.video_id,
        sentence: raw.sentence,
        start_s: fixed(raw.start_s, "start_s")?,
        end_s: fixed(raw.end_s, "end_s")?,
    };
    rec.validate()?;
    Ok(rec)
}

/// Parses JSON Lines with keys `video_id, sentence, start_s, end_s`.
pub fn parse_grounding(bytes: &[u8], mode: Mode) -> Result<Parsed<GroundingRecord>> {
    let mut out = Collector::new(mode);
    for (n, line) in data_lines(utf8(bytes)?) {
        out.push(n, parse_line(line))?;
    }
    Ok(out.parsed)
}

pub fn serialize_grounding(records: &[GroundingRecord]) -> Result<Vec<u8>> {
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| Error::Input(format!("record {i}: {e}")))?;
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{{\"video_id\":{},\"sentence\":{},\"start_s\":{},\"end_s\":{}}}\n",
            json_str(&r.video_id),
            json_str(&r.sentence),
            r.start_s,
            r.end_s
        ));
    }
    Ok(out.into_bytes())
}
