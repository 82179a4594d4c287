//! Reports and all-or-nothing output staging.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::error::CliError;

/// A command's result together with the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Report {
    pub command: String,
    pub config: Vec<(&'static str, String)>,
    pub result: Value,
    /// Human-readable tables, already aligned.
    pub tables: Vec<Table>,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig, result: impl Serialize) -> Result<Self, CliError> {
        Ok(Self {
            command: command.to_string(),
            config: config.entries(),
            result: serde_json::to_value(result)?,
            tables: Vec::new(),
        })
    }

    pub fn with_table(mut self, t: Table) -> Self {
        self.tables.push(t);
        self
    }

    pub fn to_json(&self) -> String {
        let config: Map<String, Value> = self.config.iter().map(|(k, v)| (k.to_string(), Value::String(v.clone()))).collect();
        let mut top = Map::new();
        top.insert("command".into(), Value::String(self.command.clone()));
        top.insert("config".into(), Value::Object(config));
        top.insert("result".into(), self.result.clone());
        let mut s = serde_json::to_string_pretty(&Value::Object(top)).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("care-lab {}\n\n", self.command);
        for t in &self.tables {
            s.push_str(&t.render());
            s.push('\n');
        }
        let mut cfg = Table::new("resolved config", &["key", "value"]);
        for (k, v) in &self.config {
            cfg.row(vec![k.to_string(), v.clone()]);
        }
        s.push_str(&cfg.render());
        s
    }
}

#[derive(Clone, Debug)]
pub struct Table {
    title: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, header: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let _ = write!(s, "{c:<w$}", w = width[i]);
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.header));
        out.push_str(&line(&width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>()));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}

pub fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Up to six decimals without trailing zeros.
pub fn short(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

/// Files written together or not at all.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_report(&mut self, stem: &str, report: &Report) {
        self.add(&format!("{stem}.json"), report.to_json().into_bytes());
        self.add(&format!("{stem}.txt"), report.to_text().into_bytes());
    }

    /// Writes every file to a temporary name, then renames them all into
    /// place. Existing targets are refused unless `force`.
    pub fn commit(self, force: bool) -> Result<Vec<PathBuf>, CliError> {
        let targets: Vec<PathBuf> = self.files.iter().map(|(n, _)| self.dir.join(n)).collect();
        if !force {
            if let Some(t) = targets.iter().find(|t| t.exists()) {
                return Err(CliError::Collision(t.clone()));
            }
        }
        let created = !self.dir.exists();
        std::fs::create_dir_all(&self.dir)?;
        let mut staged: Vec<tempfile::NamedTempFile> = Vec::new();
        let written = (|| -> Result<(), CliError> {
            for (_, bytes) in &self.files {
                let mut f = tempfile::Builder::new().prefix(".care-lab-").tempfile_in(&self.dir)?;
                std::io::Write::write_all(&mut f, bytes)?;
                f.as_file().sync_all()?;
                staged.push(f);
            }
            Ok(())
        })();
        if let Err(e) = written {
            drop(staged);
            if created {
                let _ = std::fs::remove_dir(&self.dir);
            }
            return Err(e);
        }
        for (f, t) in staged.into_iter().zip(&targets) {
            f.persist(t).map_err(|e| CliError::from(e.error))?;
        }
        Ok(targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_aligns_columns() {
        let mut t = Table::new("t", &["a", "value"]);
        t.row(vec!["long name".into(), "1".into()]);
        assert_eq!(t.render(), "t\na          value\n---------  -----\nlong name  1\n");
    }

    #[test]
    fn commit_refuses_collisions_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "old").unwrap();
        let mut out = Outputs::new(dir.path());
        out.add("a.txt", b"new".to_vec());
        out.add("b.txt", b"new".to_vec());
        assert!(matches!(out.commit(false), Err(CliError::Collision(_))));
        assert!(!dir.path().join("a.txt").exists());
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }
}
