//! Delimited z-score tables.
//!
//! A table has a header row. The delimiter is a comma unless the header
//! contains a tab. A column named `compound_id` (or `id`) supplies
//! identifiers; otherwise rows are numbered from 1.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// One selected z-score column.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreDataset {
    pub compound_ids: Vec<String>,
    pub column: String,
    pub values: Vec<f64>,
}

impl ZScoreDataset {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub rows: usize,
    /// Rows whose selected cell was blank or `NA`.
    pub missing: usize,
    /// Rows that could not be read at all, or held a non-numeric value.
    pub unparseable: usize,
    pub mean: f64,
    pub sd: f64,
}

impl IngestReport {
    pub fn dropped(&self) -> usize {
        self.missing + self.unparseable
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "null")
}

/// Reads one z-score column from a delimited text file.
///
/// Rows with a missing cell are dropped and counted. More than 1% of rows
/// failing to parse is a data error.
pub fn ingest_zscores(path: &Path, column: &str) -> Result<(ZScoreDataset, IngestReport)> {
    let text = fs::read_to_string(path)?;
    parse_zscores(&text, column)
}

pub fn parse_zscores(text: &str, column: &str) -> Result<(ZScoreDataset, IngestReport)> {
    let header_line = text.lines().next().unwrap_or("");
    let delimiter = if header_line.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Data("file has no header row".into()));
    }
    let names: Vec<&str> = headers.iter().collect();
    let Some(col) = names.iter().position(|h| *h == column) else {
        return Err(Error::Data(format!(
            "no column {column:?}; available columns: {}",
            names.join(", ")
        )));
    };
    let id_col = names.iter().position(|h| matches!(*h, "compound_id" | "id"));

    let mut ids = Vec::new();
    let mut values = Vec::new();
    let (mut rows, mut missing, mut unparseable) = (0usize, 0usize, 0usize);
    for record in reader.records() {
        rows += 1;
        let Ok(record) = record else {
            unparseable += 1;
            continue;
        };
        if record.len() != headers.len() {
            unparseable += 1;
            continue;
        }
        let cell = &record[col];
        if is_missing(cell) {
            missing += 1;
            continue;
        }
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                ids.push(id_col.map_or_else(|| rows.to_string(), |c| record[c].to_string()));
                values.push(v);
            }
            _ => unparseable += 1,
        }
    }
    if unparseable as f64 > 0.01 * rows as f64 {
        return Err(Error::Data(format!(
            "{unparseable} of {rows} rows could not be parsed (more than 1%)"
        )));
    }
    if values.is_empty() {
        return Err(Error::Data(format!("column {column:?} has no usable values")));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let report = IngestReport {
        rows,
        missing,
        unparseable,
        mean,
        sd,
    };
    log::info!(
        "read {} values from column {column:?} ({} of {rows} rows dropped); mean {mean:.4}, sd {sd:.4}",
        values.len(),
        report.dropped()
    );
    let dataset = ZScoreDataset {
        compound_ids: ids,
        column: column.to_string(),
        values,
    };
    Ok((dataset, report))
}

/// Writes a `compound_id,<column>` table. Values are printed in shortest
/// round-trip form.
pub fn write_zscores(path: &Path, dataset: &ZScoreDataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["compound_id", dataset.column.as_str()])?;
    for (id, v) in dataset.compound_ids.iter().zip(&dataset.values) {
        writer.write_record([id.as_str(), v.to_string().as_str()])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{simulate_screen, MixtureParams, StageModel};
    use crate::seed::Seed;

    #[test]
    fn well_formed() {
        let (d, r) = parse_zscores("compound_id,A,B\nc1,0.5,1\nc2,-1,2\nc3,3,-0.25\n", "B").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.values, vec![1.0, 2.0, -0.25]);
        assert_eq!(d.compound_ids, vec!["c1", "c2", "c3"]);
        assert_eq!(r.dropped(), 0);
    }

    #[test]
    fn blank_cell_is_dropped() {
        let (d, r) = parse_zscores("compound_id,B\nc1,1\nc2,\nc3,3\n", "B").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!((r.missing, r.dropped()), (1, 1));
        assert_eq!(d.compound_ids, vec!["c1", "c3"]);
    }

    #[test]
    fn tab_delimited_without_ids() {
        let (d, _) = parse_zscores("A\tB\n1\t2\n3\t4\n", "A").unwrap();
        assert_eq!(d.values, vec![1.0, 3.0]);
        assert_eq!(d.compound_ids, vec!["1", "2"]);
    }

    #[test]
    fn missing_column_lists_available() {
        let err = parse_zscores("compound_id,A\nc,1\n", "B").unwrap_err().to_string();
        assert!(err.contains("compound_id, A"), "{err}");
    }

    #[test]
    fn garbage_beyond_one_percent_fails() {
        let mut text = String::from("B\n");
        for i in 0..100 {
            text.push_str(&format!("{i}\n"));
        }
        text.push_str("oops\n");
        assert!(parse_zscores(&text, "B").is_ok());
        text.push_str("bad\n");
        assert!(matches!(parse_zscores(&text, "B"), Err(Error::Data(_))));
    }

    #[test]
    fn round_trip() {
        let model = StageModel::new(MixtureParams::new(0.1, 0.5677, 3.0735).unwrap(), 1).unwrap();
        let screen = simulate_screen(&model, 500, Seed::new(4)).unwrap();
        let dataset = ZScoreDataset {
            compound_ids: (0..500).map(|i| format!("cmp{i:05}")).collect(),
            column: "B".into(),
            values: screen.values().to_vec(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.csv");
        write_zscores(&path, &dataset).unwrap();
        let (back, report) = ingest_zscores(&path, "B").unwrap();
        assert_eq!(report.rows, 500);
        for (a, b) in back.values.iter().zip(&dataset.values) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(back.compound_ids, dataset.compound_ids);
    }
}
