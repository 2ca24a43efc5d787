//! Metrics reports (CSV and JSON) and the n-best JSONL file format.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confidence::NBestList;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "split,model,wer,accuracy,weighted_wer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub split: String,
    pub model: String,
    pub wer: Option<f64>,
    pub accuracy: Option<f64>,
    pub weighted_wer: Option<f64>,
}

impl MetricsRow {
    pub fn wer(split: impl Into<String>, model: impl Into<String>, wer: f64) -> Self {
        Self {
            split: split.into(),
            model: model.into(),
            wer: Some(wer),
            accuracy: None,
            weighted_wer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub experiment: u64,
    pub corpus: u64,
    pub student_corpus: u64,
    pub world: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    /// Student policies covered by the report.
    pub policies: Vec<String>,
    pub seeds: Seeds,
    pub rows: Vec<MetricsRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn row(&self, split: &str, model: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.split == split && r.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.split,
                r.model,
                cell(r.wer),
                cell(r.accuracy),
                cell(r.weighted_wer)
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

pub fn write_nbest(path: &Path, lists: &[NBestList]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for l in lists {
        serde_json::to_writer(&mut buf, l)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads an n-best JSONL file, validating every list against `n_max` entries.
pub fn read_nbest(path: &Path, n_max: usize) -> Result<Vec<NBestList>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let list: NBestList =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        list.validate(n_max)?;
        out.push(list);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::NBestEntry;
    use crate::metrics::tokenize;

    #[test]
    fn csv_has_fixed_header_and_four_decimals() {
        let report = MetricsReport {
            config_hash: "abc".into(),
            policies: vec!["oracle".into()],
            seeds: Seeds {
                experiment: 1,
                corpus: 2,
                student_corpus: 3,
                world: 4,
            },
            rows: vec![
                MetricsRow::wer("eval", "expert1", 0.123456),
                MetricsRow {
                    split: "eval".into(),
                    model: "weighter".into(),
                    wer: None,
                    accuracy: Some(0.5),
                    weighted_wer: Some(1.0 / 3.0),
                },
            ],
        };
        assert_eq!(
            report.to_csv(),
            "split,model,wer,accuracy,weighted_wer\neval,expert1,0.1235,,\neval,weighter,,0.5000,0.3333\n"
        );
        let back: MetricsReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(report.row("eval", "weighter").unwrap().accuracy, Some(0.5));
    }

    #[test]
    fn nbest_files_round_trip_and_reject_bad_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e1.jsonl");
        let lists = vec![NBestList::new(
            "u1",
            0,
            vec![
                NBestEntry {
                    text: tokenize("a b"),
                    score: 0.9,
                },
                NBestEntry {
                    text: tokenize("a"),
                    score: 0.4,
                },
            ],
        )];
        write_nbest(&path, &lists).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"hyps\""), "{text}");
        assert_eq!(read_nbest(&path, 10).unwrap(), lists);
        assert!(read_nbest(&path, 1).is_err());
        fs::write(&path, text.replace("0.4", "-0.4")).unwrap();
        assert!(read_nbest(&path, 10).is_err());
    }
}
