use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{align, EvalReport};

/// Build identifier baked in at compile time.
pub fn build_id() -> &'static str {
    env!("CATCH_BUILD_ID")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Percent, rounded to two decimals.
    pub value: f64,
    /// Change against the table's reference row, same units.
    pub delta: Option<f64>,
}

impl Cell {
    pub fn pct(fraction: f64) -> Self {
        Self {
            value: round2(100.0 * fraction),
            delta: None,
        }
    }

    pub fn with_delta(fraction: f64, reference: f64) -> Self {
        let value = round2(100.0 * fraction);
        Self {
            value,
            delta: Some(round2(value - round2(100.0 * reference))),
        }
    }

    pub fn render(&self) -> String {
        match self.delta {
            Some(d) => format!("{:.2} ({:+.2})", self.value, d),
            None => format!("{:.2}", self.value),
        }
    }
}

fn round2(x: f64) -> f64 {
    let r = (x * 100.0).round() / 100.0;
    // Avoid printing -0.00.
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub footnotes: Vec<String>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: Vec<String>) -> Self {
        Self {
            title: title.into(),
            columns,
            rows: Vec::new(),
            footnotes: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, cells: Vec<Cell>) {
        self.rows.push(Row {
            label: label.into(),
            cells,
        });
    }

    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn render(&self) -> String {
        let mut grid = Vec::with_capacity(self.rows.len() + 1);
        let mut header = vec![String::new()];
        header.extend(self.columns.iter().cloned());
        grid.push(header);
        for r in &self.rows {
            let mut line = vec![r.label.clone()];
            line.extend(r.cells.iter().map(Cell::render));
            grid.push(line);
        }
        let mut out = format!("{}\n{}", self.title, align(&grid));
        for (i, f) in self.footnotes.iter().enumerate() {
            out.push_str(&format!("[{}] {f}\n", i + 1));
        }
        out
    }
}

/// Outcome of a property the experiment is expected to show.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub build_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Artifact name to SHA-256 of its file.
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    pub evaluations: Vec<EvalReport>,
    pub provenance: Provenance,
}

impl Report {
    pub fn table(&self, title_prefix: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.title.starts_with(title_prefix))
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            out.push_str(&t.render());
            out.push('\n');
        }
        if !self.checks.is_empty() {
            out.push_str("checks\n");
            for c in &self.checks {
                let mark = if c.passed { "ok  " } else { "FAIL" };
                out.push_str(&format!("  {mark} {}: {}\n", c.name, c.detail));
            }
            out.push('\n');
        }
        let p = &self.provenance;
        out.push_str(&format!(
            "build {} | seed {} | config {} | dataset {}\n",
            p.build_id,
            p.seed,
            &p.config_hash[..12.min(p.config_hash.len())],
            &p.dataset_hash[..12.min(p.dataset_hash.len())]
        ));
        for (name, sum) in &p.checkpoints {
            out.push_str(&format!("  {name} {}\n", &sum[..12.min(sum.len())]));
        }
        out
    }
}

/// Writes `<experiment>.json` and `<experiment>.txt` into `dir`, creating it.
pub fn emit_report(report: &Report, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(format!("{}.json", report.experiment));
    let text = dir.join(format!("{}.txt", report.experiment));
    let mut body = serde_json::to_string_pretty(report)?;
    body.push('\n');
    fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
    fs::write(&text, report.render()).map_err(|e| Error::io(&text, e))?;
    Ok((json, text))
}

pub fn load_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut t = Table::new("accuracy", vec!["a".into(), "b".into()]);
        t.push("full", vec![Cell::pct(0.5), Cell::pct(0.123456)]);
        t.push("minus", vec![Cell::with_delta(0.4, 0.5), Cell::with_delta(0.123456, 0.123456)]);
        t.footnotes.push("note".into());
        Report {
            experiment: "unit".into(),
            tables: vec![t],
            checks: vec![],
            evaluations: vec![],
            provenance: Provenance {
                build_id: "x".into(),
                seed: 3,
                config_hash: "ab".repeat(32),
                dataset_hash: "cd".repeat(32),
                checkpoints: BTreeMap::new(),
            },
        }
    }

    #[test]
    fn text_and_json_agree_cell_for_cell() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested/reports");
        let (json, text) = emit_report(&sample(), &out).unwrap();
        let back = load_report(&json).unwrap();
        let text = fs::read_to_string(text).unwrap();
        for row in &back.tables[0].rows {
            for c in &row.cells {
                assert!(text.contains(&c.render()), "{} missing", c.render());
            }
        }
        assert!(text.contains("12.35"));
        assert!(text.contains("40.00 (-10.00)"));
        assert!(text.contains("12.35 (+0.00)"));
        assert!(text.contains("seed 3"));
    }
}
