//! Annotation manifests and their binarized label matrices.
//!
//! A manifest is a headered CSV: `sample_id` followed by one column per label
//! (`dr_grade`, `is_amd`, ...). Unknown extra columns are ignored with a warning.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{LabelKind, LabelSchema};

pub const SAMPLE_ID_COLUMN: &str = "sample_id";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),
    #[error("value {value} out of range for label `{label}` in row `{row}`")]
    OutOfRangeValue { row: String, label: String, value: i64 },
    #[error("parse error on line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("manifest has no rows")]
    Empty,
    #[error("label values must be 0 or 1, found {0}")]
    NonBinary(u8),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for ManifestError {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        ManifestError::ParseError { line, message: err.to_string() }
    }
}

/// Validated per-sample ground truth with raw (possibly graded) values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    schema: LabelSchema,
    sample_ids: Vec<String>,
    /// `n_samples x n_labels`, columns in schema order.
    raw: Array2<u8>,
}

impl Manifest {
    pub fn new(
        schema: LabelSchema,
        sample_ids: Vec<String>,
        raw: Array2<u8>,
    ) -> Result<Self, ManifestError> {
        if raw.nrows() != sample_ids.len() || raw.ncols() != schema.len() {
            return Err(ManifestError::Shape(format!(
                "{} ids and {} labels for a {}x{} value matrix",
                sample_ids.len(),
                schema.len(),
                raw.nrows(),
                raw.ncols()
            )));
        }
        check_unique(&sample_ids)?;
        for (row, id) in raw.outer_iter().zip(&sample_ids) {
            for (value, label) in row.iter().zip(schema.labels()) {
                if *value > label.kind.max_value() {
                    return Err(ManifestError::OutOfRangeValue {
                        row: id.clone(),
                        label: label.id.clone(),
                        value: i64::from(*value),
                    });
                }
            }
        }
        Ok(Self { schema, sample_ids, raw })
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn raw(&self) -> &Array2<u8> {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<(), ManifestError> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec![SAMPLE_ID_COLUMN.to_owned()];
        header.extend(self.schema.labels().iter().map(|l| l.column.clone()));
        out.write_record(&header)?;
        for (id, row) in self.sample_ids.iter().zip(self.raw.outer_iter()) {
            let mut record = vec![id.clone()];
            record.extend(row.iter().map(u8::to_string));
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }
}

fn check_unique(ids: &[String]) -> Result<(), ManifestError> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(ManifestError::DuplicateSampleId(id.clone()));
        }
    }
    Ok(())
}

/// Reads only the header of a manifest, returning the label columns.
pub fn read_label_columns(path: impl AsRef<Path>) -> Result<Vec<String>, ManifestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?;
    if headers.get(0) != Some(SAMPLE_ID_COLUMN) {
        return Err(ManifestError::MissingColumn(SAMPLE_ID_COLUMN.into()));
    }
    Ok(headers.iter().skip(1).map(str::to_owned).collect())
}

pub fn load_manifest(
    path: impl AsRef<Path>,
    schema: &LabelSchema,
) -> Result<Manifest, ManifestError> {
    let file = std::fs::File::open(path)?;
    read_manifest(file, schema)
}

pub fn read_manifest<R: Read>(reader: R, schema: &LabelSchema) -> Result<Manifest, ManifestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = reader.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == SAMPLE_ID_COLUMN)
        .ok_or_else(|| ManifestError::MissingColumn(SAMPLE_ID_COLUMN.into()))?;
    let mut label_cols = Vec::with_capacity(schema.len());
    for label in schema.labels() {
        let col = headers
            .iter()
            .position(|h| h == label.column)
            .ok_or_else(|| ManifestError::MissingColumn(label.column.clone()))?;
        label_cols.push(col);
    }
    for (i, h) in headers.iter().enumerate() {
        if i != id_col && !label_cols.contains(&i) {
            log::warn!("ignoring unknown manifest column `{h}`");
        }
    }

    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(id_col).unwrap_or_default().to_owned();
        if id.is_empty() {
            return Err(ManifestError::ParseError { line, message: "empty sample_id".into() });
        }
        if !seen.insert(id.clone()) {
            return Err(ManifestError::DuplicateSampleId(id));
        }
        for (label, &col) in schema.labels().iter().zip(&label_cols) {
            let cell = record.get(col).unwrap_or_default();
            let value: i64 = cell.parse().map_err(|_| ManifestError::ParseError {
                line,
                message: format!("`{cell}` is not an integer (column `{}`)", label.column),
            })?;
            if value < 0 || value > i64::from(label.kind.max_value()) {
                return Err(ManifestError::OutOfRangeValue {
                    row: id,
                    label: label.id.clone(),
                    value,
                });
            }
            values.push(value as u8);
        }
        ids.push(id);
    }
    let raw = Array2::from_shape_vec((ids.len(), schema.len()), values)
        .expect("row-major buffer matches shape");
    log::info!("loaded manifest with {} rows", ids.len());
    Ok(Manifest { schema: schema.clone(), sample_ids: ids, raw })
}

/// Per-sample `{0,1}` targets; columns follow the producing schema's order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryLabelMatrix {
    sample_ids: Vec<String>,
    labels: Vec<String>,
    values: Array2<u8>,
}

impl BinaryLabelMatrix {
    pub fn new(
        sample_ids: Vec<String>,
        labels: Vec<String>,
        values: Array2<u8>,
    ) -> Result<Self, ManifestError> {
        if values.nrows() != sample_ids.len() || values.ncols() != labels.len() {
            return Err(ManifestError::Shape(format!(
                "{} ids and {} labels for a {}x{} value matrix",
                sample_ids.len(),
                labels.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(&bad) = values.iter().find(|&&v| v > 1) {
            return Err(ManifestError::NonBinary(bad));
        }
        check_unique(&sample_ids)?;
        Ok(Self { sample_ids, labels, values })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_labels(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, label: usize) -> ArrayView1<'_, u8> {
        self.values.column(label)
    }

    pub fn positives(&self) -> Vec<usize> {
        self.values
            .axis_iter(Axis(1))
            .map(|c| c.iter().filter(|&&v| v == 1).count())
            .collect()
    }

    /// Rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            labels: self.labels.clone(),
            values: self.values.select(Axis(0), rows),
        }
    }

    /// Columns in the given order.
    pub fn select_labels(&self, cols: &[usize]) -> Self {
        Self {
            sample_ids: self.sample_ids.clone(),
            labels: cols.iter().map(|&c| self.labels[c].clone()).collect(),
            values: self.values.select(Axis(1), cols),
        }
    }
}

/// Maps graded labels to presence (grade >= 1) and copies binary labels.
pub fn binarize_manifest(manifest: &Manifest) -> BinaryLabelMatrix {
    let mut values = manifest.raw.clone();
    for (col, label) in manifest.schema.labels().iter().enumerate() {
        if let LabelKind::Graded { .. } = label.kind {
            values.column_mut(col).mapv_inplace(|g| u8::from(g >= 1));
        }
    }
    BinaryLabelMatrix {
        sample_ids: manifest.sample_ids.clone(),
        labels: manifest.schema.ids(),
        values,
    }
}
