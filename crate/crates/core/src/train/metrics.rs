use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{at_path, Error, Result};

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_gen: f64,
    pub loss_dis: f64,
    pub lr: f64,
    pub time_ms: f64,
}

/// Append-only JSON-lines writer that refuses non-increasing steps.
pub struct MetricsLog {
    out: BufWriter<File>,
    last_step: Option<u64>,
}

impl MetricsLog {
    /// Opens `path` for appending, picking up the last step already written.
    pub fn open(path: &Path) -> Result<Self> {
        let last_step = if path.exists() {
            read_metrics(path)?.last().map(|r| r.step)
        } else {
            None
        };
        let file = at_path(path, OpenOptions::new().create(true).append(true).open(path))?;
        Ok(Self {
            out: BufWriter::new(file),
            last_step,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| record.step <= s) {
            return Err(Error::Format(format!(
                "metrics step {} does not follow step {}",
                record.step,
                self.last_step.unwrap_or_default()
            )));
        }
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.last_step = Some(record.step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(at_path(path, File::open(path))?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            epoch: 0,
            loss_total: -1.5,
            loss_gen: -0.75,
            loss_dis: -0.75,
            lr: 1e-4,
            time_ms: 3.0,
        }
    }

    #[test]
    fn appends_and_rejects_going_backwards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        {
            let mut log = MetricsLog::open(&path).unwrap();
            log.append(&rec(1)).unwrap();
            log.append(&rec(2)).unwrap();
            assert!(log.append(&rec(2)).is_err());
        }
        let mut log = MetricsLog::open(&path).unwrap();
        assert!(log.append(&rec(1)).is_err());
        log.append(&rec(3)).unwrap();
        drop(log);
        let all = read_metrics(&path).unwrap();
        assert_eq!(all.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);
        let text = std::fs::read_to_string(&path).unwrap();
        for field in ["step", "epoch", "loss_total", "loss_gen", "loss_dis", "lr", "time_ms"] {
            assert!(text.lines().next().unwrap().contains(&format!("\"{field}\"")));
        }
    }
}
