//! CSV, curve and manifest files. Every row is flushed as it is written, so
//! files stay parseable if a run is interrupted.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("{}: {source}", path.display())]
pub struct OutputError {
    pub path: PathBuf,
    #[source]
    pub source: io::Error,
}

pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T, OutputError>;
}

impl<T, E: Into<io::Error>> IoContext<T> for Result<T, E> {
    fn at(self, path: &Path) -> Result<T, OutputError> {
        self.map_err(|e| OutputError {
            path: path.to_path_buf(),
            source: e.into(),
        })
    }
}

/// A CSV file written one flushed row at a time.
pub struct CsvLog {
    path: PathBuf,
    out: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, OutputError> {
        let file = File::create(path).at(path)?;
        let mut out = csv::Writer::from_writer(file);
        out.write_record(header).at(path)?;
        out.flush().at(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), OutputError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.out.write_record(fields).at(&self.path)?;
        self.out.flush().at(&self.path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// One point of a metric curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub wall_clock_s: f64,
    pub metric: String,
    pub value: f64,
}

impl CurveRecord {
    pub fn new(wall_clock_s: f64, metric: &str, value: f64) -> Self {
        Self {
            wall_clock_s,
            metric: metric.to_string(),
            value,
        }
    }
}

/// Writes `<metric>.csv` (`wall_clock_s,value`) for every metric listed,
/// plus `curves.dat` with one gnuplot index block per metric. Output bytes
/// depend only on the inputs.
pub fn emit_plot_data(records: &[CurveRecord], metrics: &[&str], dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    std::fs::create_dir_all(dir).at(dir)?;
    let mut written = Vec::with_capacity(metrics.len() + 1);
    let dat_path = dir.join("curves.dat");
    let mut dat = BufWriter::new(File::create(&dat_path).at(&dat_path)?);
    for (k, m) in metrics.iter().enumerate() {
        let path = dir.join(format!("{m}.csv"));
        let mut csv = CsvLog::create(&path, &["wall_clock_s", "value"])?;
        if k > 0 {
            write!(dat, "\n\n").at(&dat_path)?;
        }
        writeln!(dat, "# {m}").at(&dat_path)?;
        for r in records.iter().filter(|r| r.metric == *m) {
            csv.row([r.wall_clock_s.to_string(), r.value.to_string()])?;
            writeln!(dat, "{} {}", r.wall_clock_s, r.value).at(&dat_path)?;
        }
        written.push(path);
    }
    dat.flush().at(&dat_path)?;
    written.push(dat_path);
    Ok(written)
}

/// Reads a per-metric CSV written by [`emit_plot_data`].
pub fn parse_metric_csv(path: &Path, metric: &str) -> Result<Vec<CurveRecord>, OutputError> {
    let mut rd = csv::Reader::from_path(path).at(path)?;
    let mut out = Vec::new();
    for row in rd.deserialize::<(f64, f64)>() {
        let (t, v) = row.at(path)?;
        out.push(CurveRecord::new(t, metric, v));
    }
    Ok(out)
}

/// Reads any CSV with a header into rows of floats.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), OutputError> {
    let mut rd = csv::Reader::from_path(path).at(path)?;
    let header = rd.headers().at(path)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rd.deserialize::<Vec<f64>>() {
        rows.push(rec.at(path)?);
    }
    Ok((header, rows))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), OutputError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn empty_curve_is_header_only() {
        let d = tmp();
        let files = emit_plot_data(&[], &["best_value"], d.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), "wall_clock_s,value\n");
        assert_eq!(std::fs::read_to_string(d.path().join("curves.dat")).unwrap(), "# best_value\n");
    }

    #[test]
    fn emitted_csv_round_trips() {
        let d = tmp();
        let recs: Vec<_> = (0..7)
            .map(|i| CurveRecord::new(0.1 * i as f64 + 1e-9, "mean_return", (i as f64).sqrt() - 1.0 / 3.0))
            .collect();
        emit_plot_data(&recs, &["mean_return"], d.path()).unwrap();
        assert_eq!(parse_metric_csv(&d.path().join("mean_return.csv"), "mean_return").unwrap(), recs);
    }

    #[test]
    fn two_metrics_two_files_same_rows() {
        let d = tmp();
        let mut recs = Vec::new();
        for i in 0..5 {
            recs.push(CurveRecord::new(i as f64, "mse_x", 1.0 / (i + 1) as f64));
            recs.push(CurveRecord::new(i as f64, "mse_y", 2.0 / (i + 1) as f64));
        }
        let files = emit_plot_data(&recs, &["mse_x", "mse_y"], d.path()).unwrap();
        assert_eq!(files.len(), 3);
        let a = parse_metric_csv(&files[0], "mse_x").unwrap();
        let b = parse_metric_csv(&files[1], "mse_y").unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a.len(), b.len());
        let dat = std::fs::read_to_string(&files[2]).unwrap();
        assert_eq!(dat.matches("\n\n\n").count(), 1);
    }

    #[test]
    fn bytes_are_deterministic() {
        let (a, b) = (tmp(), tmp());
        let recs = vec![CurveRecord::new(0.5, "m", 0.25), CurveRecord::new(1.5, "m", 0.125)];
        emit_plot_data(&recs, &["m"], a.path()).unwrap();
        emit_plot_data(&recs, &["m"], b.path()).unwrap();
        for f in ["m.csv", "curves.dat"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn io_errors_carry_the_path() {
        let d = tmp();
        let blocker = d.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let e = emit_plot_data(&[], &["m"], &blocker.join("sub")).unwrap_err();
        assert!(e.to_string().contains("file"), "{e}");
    }
}
