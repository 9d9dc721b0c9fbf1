//! CSV artifacts: the per-step loss log, metric reports and comparison
//! tables. Each file starts with a `# config_hash=<hex>` comment line.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::HarnessError;
use crate::training::StepRecord;

pub const LOSS_COLUMNS: [&str; 8] = ["step", "n_drawn", "L_CT", "L_recon", "L_total", "lr", "N_k", "mu_k"];

/// Append-only writer for the loss log.
pub struct LossLog {
    writer: csv::Writer<File>,
}

impl LossLog {
    /// Starts a new log, replacing any existing file.
    pub fn create(path: &Path, config_hash: &str) -> Result<Self, HarnessError> {
        super::ensure_parent(path)?;
        let mut file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        writeln!(file, "# config_hash={config_hash}").map_err(|e| HarnessError::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(LOSS_COLUMNS).map_err(|e| csv_err(path, e))?;
        Ok(Self { writer })
    }

    /// Continues an existing log written under the same config hash.
    /// Rows after `step` (written by an interrupted run) are dropped first.
    pub fn resume(path: &Path, config_hash: &str, step: u64) -> Result<Self, HarnessError> {
        let (hash, rows) = read_loss_log(path)?;
        check_hash(path, &hash, config_hash)?;
        let mut log = Self::create(path, config_hash)?;
        for r in rows.iter().filter(|r| r.step < step) {
            log.write(r)?;
        }
        log.flush()?;
        Ok(log)
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<(), HarnessError> {
        self.writer
            .serialize((r.step, r.n_drawn, r.l_ct, r.l_recon, r.l_total, r.lr, r.n_k, r.mu_k))
            .map_err(|e| HarnessError::Format(e.to_string()))
    }

    pub fn flush(&mut self) -> Result<(), HarnessError> {
        self.writer
            .flush()
            .map_err(|e| HarnessError::Format(format!("flushing loss log: {e}")))
    }
}

/// The leading `# config_hash=` value of a CSV artifact.
pub fn read_hash_line(path: &Path) -> Result<String, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| HarnessError::io(path, e))?;
    first
        .trim_end()
        .strip_prefix("# config_hash=")
        .map(str::to_string)
        .ok_or_else(|| HarnessError::Format(format!("{}: missing config hash line", path.display())))
}

pub fn read_loss_log(path: &Path) -> Result<(String, Vec<StepRecord>), HarnessError> {
    let hash = read_hash_line(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        let (step, n_drawn, l_ct, l_recon, l_total, lr, n_k, mu_k) = rec.map_err(|e| csv_err(path, e))?;
        rows.push(StepRecord {
            step,
            n_drawn,
            l_ct,
            l_recon,
            l_total,
            lr,
            n_k,
            mu_k,
        });
    }
    Ok((hash, rows))
}

/// Writes `header` and `rows` under a hash comment line.
pub fn write_table(
    path: &Path,
    config_hash: &str,
    header: &[String],
    rows: &[Vec<String>],
) -> Result<(), HarnessError> {
    super::ensure_parent(path)?;
    let mut file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    writeln!(file, "# config_hash={config_hash}").map_err(|e| HarnessError::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        writer.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| HarnessError::io(path, e))
}

/// Metric report: one `(metric, value)` row per entry.
pub fn write_metrics(path: &Path, config_hash: &str, rows: &[(String, f64)]) -> Result<(), HarnessError> {
    let body: Vec<Vec<String>> = rows.iter().map(|(m, v)| vec![m.clone(), v.to_string()]).collect();
    write_table(path, config_hash, &["metric".into(), "value".into()], &body)
}

/// Header and rows of a table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>), HarnessError> {
    let hash = read_hash_line(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok((hash, header, rows))
}

pub(crate) fn check_hash(path: &Path, found: &str, expected: &str) -> Result<(), HarnessError> {
    if found == expected {
        Ok(())
    } else {
        Err(HarnessError::HashMismatch {
            artifact: path.display().to_string(),
            found: found.to_string(),
            expected: expected.to_string(),
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::Format(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64) -> StepRecord {
        StepRecord {
            step,
            n_drawn: 3,
            l_ct: 0.1 + step as f64 / 3.0,
            l_recon: 0.0,
            l_total: 1.0 / 7.0,
            lr: 1e-4,
            n_k: 11,
            mu_k: 0.9f64.powf(2.0 / 11.0),
        }
    }

    #[test]
    fn loss_log_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let mut log = LossLog::create(&path, "abc").unwrap();
        for k in 0..5 {
            log.write(&record(k)).unwrap();
        }
        log.flush().unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_hash=abc\nstep,n_drawn,L_CT,L_recon,L_total,lr,N_k,mu_k\n"));
        let (hash, rows) = read_loss_log(&path).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(rows, (0..5).map(record).collect::<Vec<_>>());
    }

    #[test]
    fn resume_truncates_and_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let mut log = LossLog::create(&path, "abc").unwrap();
        for k in 0..5 {
            log.write(&record(k)).unwrap();
        }
        log.flush().unwrap();
        drop(log);
        assert!(matches!(
            LossLog::resume(&path, "other", 3),
            Err(HarnessError::HashMismatch { .. })
        ));
        let mut log = LossLog::resume(&path, "abc", 3).unwrap();
        log.write(&record(3)).unwrap();
        log.flush().unwrap();
        drop(log);
        let (_, rows) = read_loss_log(&path).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn metric_report_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        write_metrics(&path, "h", &[("fid".into(), 0.5), ("recall".into(), 1.0)]).unwrap();
        let (hash, header, rows) = read_table(&path).unwrap();
        assert_eq!(hash, "h");
        assert_eq!(header, vec!["metric", "value"]);
        assert_eq!(rows, vec![vec!["fid", "0.5"], vec!["recall", "1"]]);
    }
}
