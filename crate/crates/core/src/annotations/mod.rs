//! Annotation and prediction files of the three tasks, and the stratified
//! train/test splitter.
//!
//! Every format is line oriented. Parsing collects one [`Diagnostic`] per bad
//! line and keeps going unless [`Mode::Strict`] is set. Serialising produces
//! the canonical form: stable field order and exactly three fractional digits
//! on every time and coordinate.

mod actions;
mod grounding;
mod pose;
mod split;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use actions::{parse_actions, serialize_actions, ActionClipRecord};
pub use grounding::{parse_grounding, serialize_grounding, GroundingRecord};
pub use pose::{parse_pose, serialize_pose, AnimalClass, BBox, ImageSize, Keypoint, PoseRecord, KEYPOINT_NAMES};
pub use split::{balance_summary, stratified_split, ClassBalance, SplitAssignment, SplitTag};

/// A decimal with exactly three fractional digits, stored in thousandths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fixed3(i64);

impl Fixed3 {
    /// Largest magnitude accepted, so that text round trips stay exact.
    pub const MAX_ABS: f64 = 1e12;

    pub const fn from_thousandths(n: i64) -> Self {
        Self(n)
    }

    pub fn thousandths(self) -> i64 {
        self.0
    }

    /// Rounds to the nearest thousandth, halves away from zero.
    pub fn from_f64(v: f64) -> Result<Self> {
        if !v.is_finite() || v.abs() > Self::MAX_ABS {
            return Err(Error::Input(format!("{v} is not a finite number within +-{:e}", Self::MAX_ABS)));
        }
        Ok(Self((v * 1000.0).round() as i64))
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl fmt::Display for Fixed3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:03}", a / 1000, a % 1000)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    /// Collect a diagnostic per bad line.
    #[default]
    Lenient,
    /// Fail on the first bad line.
    Strict,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// 1-based line number in the file.
    pub line: usize,
    pub reason: String,
}

/// Valid records in file order, plus one diagnostic per rejected data line.
#[derive(Clone, Debug, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub diagnostics: Vec<Diagnostic>,
    /// Non-blank lines other than a header.
    pub data_lines: usize,
}

struct Collector<T> {
    mode: Mode,
    parsed: Parsed<T>,
}

impl<T> Collector<T> {
    fn new(mode: Mode) -> Self {
        Self {
            mode,
            parsed: Parsed {
                records: Vec::new(),
                diagnostics: Vec::new(),
                data_lines: 0,
            },
        }
    }

    fn push(&mut self, line: usize, outcome: std::result::Result<T, String>) -> Result<()> {
        self.parsed.data_lines += 1;
        match outcome {
            Ok(r) => self.parsed.records.push(r),
            Err(reason) => {
                if self.mode == Mode::Strict {
                    return Err(Error::Parse { line, reason });
                }
                self.parsed.diagnostics.push(Diagnostic { line, reason });
            }
        }
        Ok(())
    }
}

fn utf8(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| Error::Input(format!("file is not UTF-8: {e}")))
}

/// Non-blank lines with their 1-based numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn fixed(v: f64, what: &str) -> std::result::Result<Fixed3, String> {
    Fixed3::from_f64(v).map_err(|_| format!("{what} {v} is not a finite number within range"))
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialise")
}

/// Identifiers must be non-empty and free of surrounding whitespace and
/// control characters.
fn check_id(value: &str, what: &str) -> std::result::Result<(), String> {
    if value.is_empty() {
        return Err(format!("empty {what}"));
    }
    if value.trim() != value || value.chars().any(char::is_control) {
        return Err(format!("{what} {value:?} has surrounding whitespace or control characters"));
    }
    Ok(())
}

/// Reads a whole annotation file.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}
