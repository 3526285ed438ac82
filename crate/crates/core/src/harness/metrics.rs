use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};

/// One training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub mlm_accuracy: f64,
    pub lr: f64,
    pub skipped: bool,
    /// Seconds since the run (or resumed segment) started.
    pub wall_time: f64,
}

/// First line of every metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsHeader {
    pub config: RunConfig,
    pub seed: u64,
    /// Step the log starts after; nonzero for resumed runs.
    pub start_step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Line {
    Header { header: MetricsHeader },
    Record(MetricsRecord),
}

/// Append-only JSON-lines log with strictly increasing steps.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    last_step: Option<u64>,
}

impl MetricsLog {
    pub fn create(path: &Path, header: MetricsHeader) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let line = serde_json::to_string(&Line::Header { header: header.clone() })?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last_step: Some(header.start_step).filter(|&s| s > 0),
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| record.step <= s) {
            return Err(Error::Invariant(format!(
                "metrics step {} does not follow {}",
                record.step,
                self.last_step.unwrap_or_default()
            )));
        }
        let line = serde_json::to_string(record)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.last_step = Some(record.step);
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: &Path) -> Result<(MetricsHeader, Vec<MetricsRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        match serde_json::from_str::<Line>(&line).map_err(|e| parse_err(e.to_string()))? {
            Line::Header { header: h } if i == 0 => header = Some(h),
            Line::Header { .. } => return Err(parse_err("header after the first line".into())),
            Line::Record(_) if header.is_none() => return Err(parse_err("missing header".into())),
            Line::Record(r) => records.push(r),
        }
    }
    let header = header.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "empty metrics file".into(),
    })?;
    Ok((header, records))
}

impl MetricsRecord {
    /// The record with its wall-clock field cleared, for run-to-run
    /// comparison.
    pub fn without_time(&self) -> Self {
        Self {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            loss: 1.5,
            mlm_loss: 1.0,
            nsp_loss: 0.5,
            mlm_accuracy: 0.25,
            lr: 1e-3,
            skipped: false,
            wall_time: 0.1,
        }
    }

    fn header() -> MetricsHeader {
        MetricsHeader {
            config: RunConfig::desk(),
            seed: 3,
            start_step: 0,
        }
    }

    #[test]
    fn roundtrip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut log = MetricsLog::create(&path, header()).unwrap();
        log.append(&record(1)).unwrap();
        log.append(&record(2)).unwrap();
        let (h, r) = read_metrics(&path).unwrap();
        assert_eq!(h, header());
        assert_eq!(r, vec![record(1), record(2)]);
    }

    #[test]
    fn steps_must_increase() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricsLog::create(&dir.path().join("m.jsonl"), header()).unwrap();
        log.append(&record(2)).unwrap();
        assert!(log.append(&record(2)).is_err());
        let mut resumed = MetricsLog::create(
            &dir.path().join("r.jsonl"),
            MetricsHeader {
                start_step: 100,
                ..header()
            },
        )
        .unwrap();
        assert!(resumed.append(&record(100)).is_err());
        resumed.append(&record(101)).unwrap();
    }
}
