//! CSV sales panels and feature matrices, JSON metadata documents.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{FeatureRow, SalesRecord, FEATURE_NAMES, NUM_FEATURES};

#[derive(Debug, thiserror::Error)]
pub enum DataIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataIoError + '_ {
    move |source| DataIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DataIoError + '_ {
    move |source| DataIoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_sales_csv(path: &Path, records: &[SalesRecord]) -> Result<(), DataIoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in records {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_sales_csv(path: &Path) -> Result<Vec<SalesRecord>, DataIoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|rec| rec.map_err(csv_err(path))).collect()
}

/// Header: key columns, the 26 registry names, then `y`.
pub fn write_features_csv(path: &Path, rows: &[FeatureRow]) -> Result<(), DataIoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["store_id", "date", "hour", "week"];
    header.extend(FEATURE_NAMES);
    header.push("y");
    w.write_record(&header).map_err(csv_err(path))?;
    for r in rows {
        let mut rec = vec![
            r.store_id.to_string(),
            r.date.to_string(),
            r.hour.to_string(),
            r.week.to_string(),
        ];
        rec.extend(r.x.iter().map(f64::to_string));
        rec.push(r.y.to_string());
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a feature CSV. Audit fields are not stored and come back empty.
pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>, DataIoError> {
    let fmt = |detail: String| DataIoError::Format {
        path: path.display().to_string(),
        detail,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let expected: Vec<&str> = ["store_id", "date", "hour", "week"]
        .into_iter()
        .chain(FEATURE_NAMES)
        .chain(["y"])
        .collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(fmt("header does not match the feature registry".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |col: usize| fmt(format!("row {}: bad value in column {}", i + 1, expected[col]));
        let num = |col: usize| rec[col].parse::<f64>().map_err(|_| bad(col));
        let mut x = [0.0; NUM_FEATURES];
        for (j, v) in x.iter_mut().enumerate() {
            *v = num(4 + j)?;
        }
        rows.push(FeatureRow {
            store_id: rec[0].parse().map_err(|_| bad(0))?,
            date: rec[1].parse::<NaiveDate>().map_err(|_| bad(1))?,
            hour: rec[2].parse().map_err(|_| bad(2))?,
            week: rec[3].parse().map_err(|_| bad(3))?,
            x,
            y: num(4 + NUM_FEATURES)?,
            lag_fallback: false,
            max_input_date: None,
        });
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataIoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| DataIoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataIoError> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| DataIoError::Json {
        path: path.display().to_string(),
        source,
    })
}
