//! Per-sample, per-label probability matrices and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("probability {value} outside [0, 1] for sample `{sample}`")]
    OutOfRange { sample: String, value: f64 },
    #[error("prediction file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub model_id: String,
    sample_ids: Vec<String>,
    labels: Vec<String>,
    probs: Array2<f64>,
}

impl PredictionMatrix {
    pub fn new(
        model_id: impl Into<String>,
        sample_ids: Vec<String>,
        labels: Vec<String>,
        probs: Array2<f64>,
    ) -> Result<Self, PredictionError> {
        if probs.nrows() != sample_ids.len() || probs.ncols() != labels.len() {
            return Err(PredictionError::Shape(format!(
                "{} ids and {} labels for a {}x{} matrix",
                sample_ids.len(),
                labels.len(),
                probs.nrows(),
                probs.ncols()
            )));
        }
        for (row, id) in probs.outer_iter().zip(&sample_ids) {
            if let Some(&bad) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(PredictionError::OutOfRange { sample: id.clone(), value: bad });
            }
        }
        Ok(Self { model_id: model_id.into(), sample_ids, labels, probs })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn n_samples(&self) -> usize {
        self.probs.nrows()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            model_id: self.model_id.clone(),
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            labels: self.labels.clone(),
            probs: self.probs.select(Axis(0), rows),
        }
    }

    /// CSV with header `sample_id,<label>...`; floats use shortest round-trip form.
    pub fn write_to<W: Write>(&self, writer: W) -> Result<(), PredictionError> {
        write_float_table(writer, &self.sample_ids, &self.labels, &self.probs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PredictionError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read_from<R: Read>(model_id: &str, reader: R) -> Result<Self, PredictionError> {
        let (ids, labels, probs) = read_float_table(reader)?;
        Self::new(model_id, ids, labels, probs)
    }

    pub fn load(model_id: &str, path: impl AsRef<Path>) -> Result<Self, PredictionError> {
        Self::read_from(model_id, std::fs::File::open(path)?)
    }
}

/// Sample ids, column names and values.
pub(crate) type FloatTable = (Vec<String>, Vec<String>, Array2<f64>);

/// Reads a `sample_id,<col>...` table of floats.
pub(crate) fn read_float_table<R: Read>(reader: R) -> Result<FloatTable, PredictionError> {
    let mut input = csv::Reader::from_reader(reader);
    let headers = input.headers()?.clone();
    if headers.get(0) != Some("sample_id") {
        return Err(PredictionError::Format("first column must be `sample_id`".into()));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for record in input.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        ids.push(record[0].to_owned());
        for cell in record.iter().skip(1) {
            values.push(cell.parse::<f64>().map_err(|_| {
                PredictionError::Format(format!("line {line}: `{cell}` is not a number"))
            })?);
        }
    }
    let matrix = Array2::from_shape_vec((ids.len(), columns.len()), values)
        .map_err(|e| PredictionError::Format(e.to_string()))?;
    Ok((ids, columns, matrix))
}

pub(crate) fn write_float_table<W: Write>(
    writer: W,
    ids: &[String],
    columns: &[String],
    values: &Array2<f64>,
) -> Result<(), PredictionError> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["sample_id".to_owned()];
    header.extend(columns.iter().cloned());
    out.write_record(&header)?;
    for (id, row) in ids.iter().zip(values.outer_iter()) {
        let mut record = vec![id.clone()];
        record.extend(row.iter().map(f64::to_string));
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}
