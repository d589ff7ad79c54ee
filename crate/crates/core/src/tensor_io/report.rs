use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Header plus stringified rows; one record per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// A result type that can be persisted. Every report serializes to JSON; types
/// with a natural tabular form also provide a CSV table.
pub trait Report: Serialize {
    fn csv_table(&self) -> Option<CsvTable> {
        None
    }
}

impl<T: Report> Report for &T {
    fn csv_table(&self) -> Option<CsvTable> {
        (*self).csv_table()
    }
}

/// JSON floats use the shortest representation that parses back to the same
/// bits, so a reload is exact.
pub fn save_report<T: Report + ?Sized>(report: &T, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Report(e.to_string()))?;
            text.push('\n');
            text.into_bytes()
        }
        ReportFormat::Csv => {
            let table = report
                .csv_table()
                .ok_or_else(|| Error::Report("this report has no CSV form".into()))?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&table.header).map_err(|e| Error::Report(e.to_string()))?;
            for row in &table.rows {
                w.write_record(row).map_err(|e| Error::Report(e.to_string()))?;
            }
            w.into_inner().map_err(|e| Error::Report(e.to_string()))?
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, serde::Deserialize, PartialEq, Debug)]
    struct Sample {
        values: Vec<f64>,
    }

    impl Report for Sample {
        fn csv_table(&self) -> Option<CsvTable> {
            let mut t = CsvTable::new(["index", "value"]);
            for (i, v) in self.values.iter().enumerate() {
                t.push(vec![i.to_string(), v.to_string()]);
            }
            Some(t)
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = Sample {
            values: vec![0.1, 1.0 / 3.0, -2.5e-300, std::f64::consts::PI, 123456789.12345679],
        };
        let path = dir.path().join("s.json");
        save_report(&s, &path, ReportFormat::Json).unwrap();
        let back: Sample = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for (a, b) in s.values.iter().zip(&back.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_has_header_and_one_row_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        save_report(&Sample { values: vec![1.0, 2.0, 3.0] }, &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines, ["index,value", "0,1", "1,2", "2,3"]);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_report(&Sample { values: vec![] }, "/nonexistent-dir/x/y.json", ReportFormat::Json).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
