//! Label schema: the ordered set of output labels shared by every stage.
//!
//! Column order in every matrix, file and report follows the schema order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How a label is annotated in a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LabelKind {
    Binary,
    /// Ordinal grade in `0..=max_grade`; grade 0 is absence.
    Graded { max_grade: u8 },
}

impl LabelKind {
    pub fn max_value(self) -> u8 {
        match self {
            LabelKind::Binary => 1,
            LabelKind::Graded { max_grade } => max_grade,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDef {
    /// Short identifier, e.g. `dr`.
    pub id: String,
    /// Manifest column holding the raw value, e.g. `dr_grade`.
    pub column: String,
    #[serde(flatten)]
    pub kind: LabelKind,
}

impl LabelDef {
    pub fn binary(id: &str) -> Self {
        Self { id: id.to_owned(), column: format!("is_{id}"), kind: LabelKind::Binary }
    }

    pub fn graded(id: &str, max_grade: u8) -> Self {
        Self {
            id: id.to_owned(),
            column: format!("{id}_grade"),
            kind: LabelKind::Graded { max_grade },
        }
    }

    /// Label whose column name is the identifier itself (external taxonomies).
    pub fn raw(column: &str) -> Self {
        Self { id: column.to_owned(), column: column.to_owned(), kind: LabelKind::Binary }
    }

    /// Inverse of the `is_<id>` / `<id>_grade` column conventions. Columns
    /// matching neither convention become binary labels named after the column.
    pub fn from_column(column: &str) -> Self {
        if let Some(id) = column.strip_prefix("is_").filter(|s| !s.is_empty()) {
            Self::binary(id)
        } else if let Some(id) = column.strip_suffix("_grade").filter(|s| !s.is_empty()) {
            Self::graded(id, DEFAULT_MAX_GRADE)
        } else {
            Self::raw(column)
        }
    }
}

/// Grade ceiling assumed for `<id>_grade` columns when inferring a schema.
pub const DEFAULT_MAX_GRADE: u8 = 4;

/// The canonical eleven labels, alphabetical by abbreviation.
pub const CANONICAL_LABELS: [&str; 11] =
    ["amd", "aon", "crp", "dm", "dme", "dr", "em", "gc", "htr", "pm", "rvo"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema has no labels")]
    Empty,
    #[error("duplicate label identifier `{0}`")]
    DuplicateLabel(String),
    #[error("duplicate manifest column `{0}`")]
    DuplicateColumn(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LabelDef>", into = "Vec<LabelDef>")]
pub struct LabelSchema {
    labels: Vec<LabelDef>,
}

impl LabelSchema {
    pub fn new(labels: Vec<LabelDef>) -> Result<Self, SchemaError> {
        if labels.is_empty() {
            return Err(SchemaError::Empty);
        }
        for (i, label) in labels.iter().enumerate() {
            if labels[..i].iter().any(|l| l.id == label.id) {
                return Err(SchemaError::DuplicateLabel(label.id.clone()));
            }
            if labels[..i].iter().any(|l| l.column == label.column) {
                return Err(SchemaError::DuplicateColumn(label.column.clone()));
            }
        }
        Ok(Self { labels })
    }

    /// The eleven-disease schema; `dr` is the only graded label (grades 0-4).
    pub fn canonical() -> Self {
        let labels = CANONICAL_LABELS
            .iter()
            .map(|&id| if id == "dr" { LabelDef::graded(id, 4) } else { LabelDef::binary(id) })
            .collect();
        Self { labels }
    }

    /// Builds a schema from manifest header columns (excluding `sample_id`).
    pub fn infer_from_columns<S: AsRef<str>>(columns: &[S]) -> Result<Self, SchemaError> {
        Self::new(columns.iter().map(|c| LabelDef::from_column(c.as_ref())).collect())
    }

    /// Keeps the listed labels, in schema order.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self, SchemaError> {
        for id in ids {
            if self.index_of(id.as_ref()).is_none() {
                return Err(SchemaError::UnknownLabel(id.as_ref().to_owned()));
            }
        }
        let labels = self
            .labels
            .iter()
            .filter(|l| ids.iter().any(|id| id.as_ref() == l.id))
            .cloned()
            .collect();
        Self::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[LabelDef] {
        &self.labels
    }

    pub fn ids(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.id == id)
    }

    pub fn get(&self, index: usize) -> &LabelDef {
        &self.labels[index]
    }
}

impl TryFrom<Vec<LabelDef>> for LabelSchema {
    type Error = SchemaError;

    fn try_from(labels: Vec<LabelDef>) -> Result<Self, Self::Error> {
        Self::new(labels)
    }
}

impl From<LabelSchema> for Vec<LabelDef> {
    fn from(schema: LabelSchema) -> Self {
        schema.labels
    }
}
