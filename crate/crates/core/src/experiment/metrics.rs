use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const TRANSCRIPT_FILE: &str = "transcript.bin";

pub const METRICS_HEADER: &str =
    "round,mean_classification_loss,domain_loss,consistency_loss,target_accuracy";

/// One line of `metrics.csv`. Disabled loss terms are written as empty fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub mean_classification_loss: f64,
    pub domain_loss: Option<f64>,
    pub consistency_loss: Option<f64>,
    pub target_accuracy: f64,
    pub wall_clock_ms: u128,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.round,
            self.mean_classification_loss,
            opt(self.domain_loss),
            opt(self.consistency_loss),
            self.target_accuracy
        )
    }
}

/// Appends rows to `metrics.csv` and the wall-clock sidecar `timing.csv`,
/// flushing after every round.
pub struct MetricsWriter {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    metrics_path: PathBuf,
    timing_path: PathBuf,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let metrics_path = dir.join(METRICS_FILE);
        let timing_path = dir.join(TIMING_FILE);
        let open = |p: &Path| {
            File::create(p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(p, e))
        };
        let mut w = Self {
            metrics: open(&metrics_path)?,
            timing: open(&timing_path)?,
            metrics_path,
            timing_path,
        };
        w.line_metrics(METRICS_HEADER)?;
        w.line_timing("round,wall_clock_ms")?;
        w.flush()?;
        Ok(w)
    }

    fn line_metrics(&mut self, s: &str) -> Result<()> {
        writeln!(self.metrics, "{s}").map_err(|e| Error::io(&self.metrics_path, e))
    }

    fn line_timing(&mut self, s: &str) -> Result<()> {
        writeln!(self.timing, "{s}").map_err(|e| Error::io(&self.timing_path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics
            .flush()
            .map_err(|e| Error::io(&self.metrics_path, e))?;
        self.timing
            .flush()
            .map_err(|e| Error::io(&self.timing_path, e))
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.line_metrics(&row.to_csv())?;
        self.line_timing(&format!("{},{}", row.round, row.wall_clock_ms))?;
        self.flush()
    }
}

/// Parses a `metrics.csv` back into `(round, accuracy)` pairs.
pub fn read_accuracies(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "unexpected metrics header".into(),
        });
    }
    let mut offset = METRICS_HEADER.len() as u64 + 1;
    let mut out = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("malformed metrics row {line:?}"),
        };
        if fields.len() != 5 {
            return Err(bad());
        }
        let round = fields[0].parse().map_err(|_| bad())?;
        let acc = fields[4].parse().map_err(|_| bad())?;
        out.push((round, acc));
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// Writes `contents` to `path` through a temporary sibling and a rename, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Key/value summary of a finished run.
#[derive(Clone, Debug, Default)]
pub struct SummaryText(String);

impl SummaryText {
    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.0, "{key} = {value}");
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_format() {
        let row = MetricsRow {
            round: 3,
            mean_classification_loss: 0.5,
            domain_loss: None,
            consistency_loss: Some(0.25),
            target_accuracy: 0.875,
            wall_clock_ms: 12,
        };
        assert_eq!(row.to_csv(), "3,0.5,,0.25,0.875");
    }

    #[test]
    fn writer_and_reader_agree() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        for r in 1..=3 {
            w.append(&MetricsRow {
                round: r,
                mean_classification_loss: 1.0 / r as f64,
                domain_loss: Some(2.0),
                consistency_loss: None,
                target_accuracy: 0.1 * r as f64,
                wall_clock_ms: 0,
            })
            .unwrap();
        }
        drop(w);
        let acc = read_accuracies(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(acc, vec![(1, 0.1), (2, 0.2), (3, 0.1 * 3.0)]);
        let timing = fs::read_to_string(dir.path().join(TIMING_FILE)).unwrap();
        assert_eq!(timing.lines().count(), 4);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        write_atomic(&p, "a = 1\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a = 1\n");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
