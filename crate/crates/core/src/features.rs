//! Tabular input features, one row per sample.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::predictions::{read_float_table, write_float_table, PredictionError};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub sample_ids: Vec<String>,
    pub names: Vec<String>,
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(sample_ids: Vec<String>, names: Vec<String>, values: Array2<f64>) -> Result<Self, PredictionError> {
        if values.nrows() != sample_ids.len() || values.ncols() != names.len() {
            return Err(PredictionError::Shape(format!(
                "{} ids and {} names for a {}x{} matrix",
                sample_ids.len(),
                names.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PredictionError::Format("features must be finite".into()));
        }
        Ok(Self { sample_ids, names, values })
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            names: self.names.clone(),
            values: self.values.select(Axis(0), rows),
        }
    }

    /// Reorders rows to follow `ids`; every id must be present.
    pub fn align_to(&self, ids: &[String]) -> Result<Self, PredictionError> {
        let index: HashMap<&str, usize> =
            self.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let rows = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| PredictionError::Format(format!("no feature row for sample `{id}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.select_rows(&rows))
    }

    pub fn column_means(&self) -> Array1<f64> {
        self.values.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(self.n_features()))
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<(), PredictionError> {
        write_float_table(writer, &self.sample_ids, &self.names, &self.values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PredictionError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self, PredictionError> {
        let (ids, names, values) = read_float_table(reader)?;
        Self::new(ids, names, values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PredictionError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
