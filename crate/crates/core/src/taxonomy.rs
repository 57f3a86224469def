//! Maps an external dataset's label taxonomy onto the model's output labels.
//! A target label is positive when any of its source labels is present.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{binarize_manifest, BinaryLabelMatrix, Manifest, ManifestError};
use crate::schema::LabelSchema;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("mapping file: {0}")]
    ParseError(String),
    #[error("mapping target `{0}` is not a schema label")]
    UnknownTargetLabel(String),
    #[error("mapping has no entries, or target `{0}` has no sources")]
    EmptyMapping(String),
    #[error("source label `{0}` is not present in the external manifest")]
    UnknownSourceLabel(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Target label → source labels, OR-aggregated. A source may feed several targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelMapping {
    pub entries: IndexMap<String, Vec<String>>,
}

impl LabelMapping {
    pub fn new(entries: IndexMap<String, Vec<String>>, schema: &LabelSchema) -> Result<Self, TaxonomyError> {
        if entries.is_empty() {
            return Err(TaxonomyError::EmptyMapping(String::new()));
        }
        for (target, sources) in &entries {
            if schema.index_of(target).is_none() {
                return Err(TaxonomyError::UnknownTargetLabel(target.clone()));
            }
            if sources.is_empty() {
                return Err(TaxonomyError::EmptyMapping(target.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json(text: &str, schema: &LabelSchema) -> Result<Self, TaxonomyError> {
        let entries = serde_json::from_str(text).map_err(|e| TaxonomyError::ParseError(e.to_string()))?;
        Self::new(entries, schema)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mapping serializes")
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

pub fn load_mapping(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<LabelMapping, TaxonomyError> {
    LabelMapping::from_json(&std::fs::read_to_string(path)?, schema)
}

const RFMID_PRESET: &str = include_str!("../presets/rfmid_mapping.json");

/// The bundled RFMiD → canonical-schema mapping (eight targets).
pub fn rfmid_preset() -> LabelMapping {
    LabelMapping::from_json(RFMID_PRESET, &LabelSchema::canonical()).expect("bundled preset is valid")
}

/// External ground truth expressed in schema labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedTruth {
    /// Mapped targets only, in schema order.
    pub truth: BinaryLabelMatrix,
    /// Schema labels with no mapping entry; excluded from evaluation.
    pub unmapped: Vec<String>,
}

/// OR-aggregates the binarized source columns of `external` per target.
pub fn map_binary(
    external: &BinaryLabelMatrix,
    mapping: &LabelMapping,
    schema: &LabelSchema,
) -> Result<MappedTruth, TaxonomyError> {
    let targets: Vec<&str> = schema.labels().iter().map(|l| l.id.as_str()).filter(|id| mapping.entries.contains_key(*id)).collect();
    let unmapped =
        schema.labels().iter().map(|l| l.id.clone()).filter(|id| !mapping.entries.contains_key(id)).collect();
    let source_cols = targets
        .iter()
        .map(|t| {
            mapping.entries[*t]
                .iter()
                .map(|s| {
                    external
                        .labels()
                        .iter()
                        .position(|l| l == s)
                        .ok_or_else(|| TaxonomyError::UnknownSourceLabel(s.clone()))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ext = external.values();
    let values = Array2::from_shape_fn((external.n_samples(), targets.len()), |(i, t)| {
        u8::from(source_cols[t].iter().any(|&c| ext[[i, c]] == 1))
    });
    let truth = BinaryLabelMatrix::new(
        external.sample_ids().to_vec(),
        targets.iter().map(|t| t.to_string()).collect(),
        values,
    )?;
    Ok(MappedTruth { truth, unmapped })
}

/// [`map_binary`] on a raw external manifest, binarized first.
pub fn map_ground_truth(
    external: &Manifest,
    mapping: &LabelMapping,
    schema: &LabelSchema,
) -> Result<MappedTruth, TaxonomyError> {
    map_binary(&binarize_manifest(external), mapping, schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::read_manifest;
    use proptest::prelude::*;

    fn external(columns: &[&str], rows: &[&[u8]]) -> BinaryLabelMatrix {
        let values = Array2::from_shape_fn((rows.len(), columns.len()), |(i, j)| rows[i][j]);
        BinaryLabelMatrix::new(
            (0..rows.len()).map(|i| format!("e{i}")).collect(),
            columns.iter().map(|c| c.to_string()).collect(),
            values,
        )
        .unwrap()
    }

    const RFMID_COLUMNS: [&str; 23] = [
        "DR", "DME", "ARMD", "ERM", "BRVO", "CRVO", "MYA", "TSLN", "TD", "AION", "ODP", "ODE", "MNF", "ODPM", "RS",
        "CRS", "VS", "CSR", "PT", "PTCR", "CF", "RP", "MH",
    ];

    #[test]
    fn preset_matches_table() {
        let m = rfmid_preset();
        let targets: Vec<&str> = m.targets().collect();
        assert_eq!(targets, ["dr", "dme", "amd", "em", "rvo", "pm", "aon", "crp"]);
        assert_eq!(m.entries["rvo"], ["BRVO", "CRVO"]);
        assert_eq!(m.entries["pm"], ["MYA", "TSLN", "TD"]);
        assert!(m.entries["aon"].contains(&"TD".to_string()));
        assert_eq!(m.entries["crp"].len(), 8);
    }

    #[test]
    fn or_aggregation_examples() {
        let ext = external(&["BRVO", "CRVO", "MYA", "TSLN", "TD"], &[&[1, 0, 0, 1, 0], &[0, 0, 0, 0, 0]]);
        let mut entries = IndexMap::new();
        entries.insert("rvo".to_string(), vec!["BRVO".to_string(), "CRVO".to_string()]);
        entries.insert("pm".to_string(), vec!["MYA".to_string(), "TSLN".to_string(), "TD".to_string()]);
        let mapping = LabelMapping::new(entries, &LabelSchema::canonical()).unwrap();
        let mapped = map_binary(&ext, &mapping, &LabelSchema::canonical()).unwrap();
        // schema order: pm before rvo
        assert_eq!(mapped.truth.labels(), ["pm", "rvo"]);
        assert_eq!(mapped.truth.values(), &ndarray::array![[1, 1], [0, 0]]);
        assert_eq!(mapped.unmapped.len(), 9);
    }

    #[test]
    fn rfmid_evaluates_eight_and_reports_three() {
        let ext = external(&RFMID_COLUMNS, &[&[0; 23]]);
        let mapped = map_binary(&ext, &rfmid_preset(), &LabelSchema::canonical()).unwrap();
        assert_eq!(mapped.truth.n_labels(), 8);
        assert_eq!(mapped.unmapped, ["dm", "gc", "htr"]);
    }

    #[test]
    fn errors() {
        let schema = LabelSchema::canonical();
        assert!(matches!(LabelMapping::from_json(r#"{"xyz": ["A"]}"#, &schema), Err(TaxonomyError::UnknownTargetLabel(t)) if t == "xyz"));
        assert!(matches!(LabelMapping::from_json("{}", &schema), Err(TaxonomyError::EmptyMapping(_))));
        assert!(matches!(LabelMapping::from_json(r#"{"dr": []}"#, &schema), Err(TaxonomyError::EmptyMapping(t)) if t == "dr"));
        assert!(matches!(LabelMapping::from_json("[1", &schema), Err(TaxonomyError::ParseError(_))));
        let ext = external(&["DR"], &[&[1]]);
        assert!(matches!(map_binary(&ext, &rfmid_preset(), &schema), Err(TaxonomyError::UnknownSourceLabel(s)) if s == "ARMD"));
    }

    #[test]
    fn json_round_trip() {
        let m = rfmid_preset();
        let again = LabelMapping::from_json(&m.to_json(), &LabelSchema::canonical()).unwrap();
        assert_eq!(again, m);
        assert_eq!(LabelMapping::from_json(&again.to_json(), &LabelSchema::canonical()).unwrap().to_json(), m.to_json());
    }

    #[test]
    fn raw_manifest_columns_are_sources() {
        let text = "sample_id,DR,BRVO,CRVO\na,1,0,1\nb,0,0,0\n";
        let schema = LabelSchema::infer_from_columns(&["DR", "BRVO", "CRVO"]).unwrap();
        let manifest = read_manifest(text.as_bytes(), &schema).unwrap();
        let mut entries = IndexMap::new();
        entries.insert("rvo".to_string(), vec!["BRVO".to_string(), "CRVO".to_string()]);
        entries.insert("dr".to_string(), vec!["DR".to_string()]);
        let mapping = LabelMapping::new(entries, &LabelSchema::canonical()).unwrap();
        let mapped = map_ground_truth(&manifest, &mapping, &LabelSchema::canonical()).unwrap();
        assert_eq!(mapped.truth.labels(), ["dr", "rvo"]);
        assert_eq!(mapped.truth.values(), &ndarray::array![[1, 1], [0, 0]]);
    }

    proptest! {
        #[test]
        fn or_is_monotone_and_row_independent(
            bits in prop::collection::vec(prop::collection::vec(0u8..=1, 23), 1..40),
            flip_row in any::<prop::sample::Index>(),
            flip_col in 0usize..23,
        ) {
            let rows: Vec<&[u8]> = bits.iter().map(Vec::as_slice).collect();
            let ext = external(&RFMID_COLUMNS, &rows);
            let schema = LabelSchema::canonical();
            let base = map_binary(&ext, &rfmid_preset(), &schema).unwrap();
            let r = flip_row.index(bits.len());
            let mut raised = bits.clone();
            raised[r][flip_col] = 1;
            let rows2: Vec<&[u8]> = raised.iter().map(Vec::as_slice).collect();
            let up = map_binary(&external(&RFMID_COLUMNS, &rows2), &rfmid_preset(), &schema).unwrap();
            for (a, b) in base.truth.values().iter().zip(up.truth.values()) {
                prop_assert!(b >= a);
            }
            let reversed: Vec<&[u8]> = rows.iter().rev().copied().collect();
            let rev = map_binary(&external(&RFMID_COLUMNS, &reversed), &rfmid_preset(), &schema).unwrap();
            let n = bits.len();
            for i in 0..n {
                prop_assert_eq!(rev.truth.values().row(i), base.truth.values().row(n - 1 - i));
            }
        }
    }
}
