//! Zero-shot evaluation of a trained run on an external dataset.
//!
//! A base model's external prediction is the mean of its K fold models'
//! probabilities; the meta-learner is applied to those means.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{load_manifest_inferred, write_json, write_roc_files, PipelineError, RunLayout, RunLedger};
use crate::features::FeatureMatrix;
use crate::manifest::{binarize_manifest, BinaryLabelMatrix};
use crate::metrics::{macro_report, MetricsReport};
use crate::predictions::PredictionMatrix;
use crate::stacking::{predict_meta, GbdtMetaLearner, OofMatrix};
use crate::taxonomy::{map_binary, LabelMapping, TaxonomyError};
use crate::trainer::{predict, BaseLearnerModel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExternalTarget {
    Meta,
    Model(String),
}

impl ExternalTarget {
    pub fn parse(name: &str) -> Self {
        if name == "meta" {
            Self::Meta
        } else {
            Self::Model(name.to_string())
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Meta => "meta",
            Self::Model(m) => m,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExternalEvaluation {
    pub report: MetricsReport,
    pub predictions: PredictionMatrix,
    pub truth: BinaryLabelMatrix,
}

/// External ground truth in run-schema labels. Without a mapping every
/// external label must already be a schema label.
fn external_truth(
    external: &BinaryLabelMatrix,
    mapping: Option<&LabelMapping>,
    ledger: &RunLedger,
) -> Result<BinaryLabelMatrix, PipelineError> {
    if let Some(mapping) = mapping {
        return Ok(map_binary(external, mapping, &ledger.schema)?.truth);
    }
    if let Some(unknown) = external.labels().iter().find(|l| ledger.schema.index_of(l).is_none()) {
        return Err(TaxonomyError::UnknownSourceLabel(unknown.clone()).into());
    }
    let mut cols: Vec<usize> = (0..external.n_labels()).collect();
    cols.sort_by_key(|&c| ledger.schema.index_of(&external.labels()[c]));
    Ok(external.select_labels(&cols))
}

/// Mean of the fold models' probabilities for `model_id`.
fn fold_mean(layout: &RunLayout, ledger: &RunLedger, model_id: &str, features: &FeatureMatrix) -> Result<PredictionMatrix, PipelineError> {
    let k = ledger.config.k_folds;
    let mut sum: Option<(Vec<String>, Array2<f64>)> = None;
    for fold in 0..k {
        let path = layout.path(&RunLayout::model(model_id, fold));
        if !path.is_file() {
            return Err(PipelineError::IncompleteRun(format!("missing model `{}`", path.display())));
        }
        let pred = predict(&BaseLearnerModel::load(path)?, features)?;
        match &mut sum {
            None => sum = Some((pred.labels().to_vec(), pred.probs().clone())),
            Some((_, acc)) => *acc += pred.probs(),
        }
    }
    let (labels, acc) = sum.expect("k >= 2");
    Ok(PredictionMatrix::new(model_id, features.sample_ids.clone(), labels, acc / k as f64)?)
}

/// Runs the target on `features` and scores it against `manifest_path`
/// (schema inferred from its header), optionally through `mapping`. The
/// decision threshold defaults to the run's.
pub fn evaluate_external(
    run_dir: impl AsRef<Path>,
    target: &ExternalTarget,
    features: &FeatureMatrix,
    manifest_path: impl AsRef<Path>,
    mapping: Option<&LabelMapping>,
    threshold: Option<f64>,
) -> Result<ExternalEvaluation, PipelineError> {
    let layout = RunLayout::new(run_dir.as_ref());
    let ledger = RunLedger::load(&layout)?;
    let manifest = load_manifest_inferred(manifest_path)?;
    if manifest.is_empty() {
        return Err(PipelineError::EmptyExternalSet);
    }
    let truth = external_truth(&binarize_manifest(&manifest), mapping, &ledger)?;
    let features = features.align_to(truth.sample_ids())?;
    let model_ids: Vec<String> = ledger.config.templates().into_iter().map(|t| t.model_id).collect();

    let predictions = match target {
        ExternalTarget::Model(m) => {
            if !model_ids.contains(m) {
                return Err(PipelineError::Validation(format!("run has no model `{m}`")));
            }
            fold_mean(&layout, &ledger, m, &features)?
        }
        ExternalTarget::Meta => {
            let meta_path = layout.path(RunLayout::META_MODEL);
            if !meta_path.is_file() {
                return Err(PipelineError::IncompleteRun("meta model has not been fit".into()));
            }
            let meta = GbdtMetaLearner::load(meta_path)?;
            let blocks =
                model_ids.iter().map(|m| fold_mean(&layout, &ledger, m, &features)).collect::<Result<Vec<_>, _>>()?;
            let labels = blocks[0].labels().to_vec();
            let mut feature_names = Vec::new();
            let mut columns = Vec::new();
            for block in &blocks {
                for (c, label) in block.labels().iter().enumerate() {
                    feature_names.push(crate::stacking::feature_name(block.model_id.as_str(), label));
                    columns.push(block.probs().column(c).to_owned());
                }
            }
            debug_assert_eq!(labels.len() * blocks.len(), columns.len());
            let views: Vec<_> = columns.iter().map(|c| c.view()).collect();
            let values = ndarray::stack(ndarray::Axis(1), &views).expect("equal column lengths");
            let stacked = OofMatrix { sample_ids: features.sample_ids.clone(), feature_names, values };
            predict_meta(&meta, &stacked)?
        }
    };
    let report = macro_report(&predictions, &truth, threshold.unwrap_or(ledger.config.threshold))?;
    Ok(ExternalEvaluation { report, predictions, truth })
}

/// Writes `report.json`, `predictions.csv` and `roc/<target>/<label>.csv`
/// under `out_dir`; returns the files written.
pub fn write_external(
    evaluation: &ExternalEvaluation,
    target: &ExternalTarget,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, PipelineError> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out)?;
    let report_path = out.join("report.json");
    write_json(&report_path, &evaluation.report)?;
    let pred_path = out.join("predictions.csv");
    evaluation.predictions.save(&pred_path)?;
    let mut written = vec![report_path, pred_path];
    written.extend(write_roc_files(out, target.name(), &evaluation.predictions, &evaluation.truth)?);
    Ok(written)
}
