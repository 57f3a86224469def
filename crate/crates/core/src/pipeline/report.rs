//! The consolidated run report. It holds no timestamps or absolute paths, so
//! identical runs produce byte-identical files.

use serde::{Deserialize, Serialize};

use super::{PipelineError, Run};
use crate::metrics::MetricsReport;
use crate::stacking::{feature_importance, FeatureShare, StackingError};

/// JSON Schema the report is validated against.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterRow {
    pub model_id: String,
    pub hidden_units: usize,
    pub feature_fraction: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    /// `search` or `preset`.
    pub source: String,
    pub best_trial: Option<usize>,
    pub best_value: Option<f64>,
    pub n_trials: usize,
    pub n_pruned: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScope {
    /// All samples, out-of-fold predictions.
    Oof,
    /// The stacking hold-out rows only.
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub block: String,
    pub scope: EvalScope,
    pub report: MetricsReport,
}

/// Macro metrics on the hold-out rows, for comparing the meta-learner with
/// each single model on the same samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_id: String,
    pub macro_auc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
}

impl From<&MetricsReport> for ComparisonRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            model_id: r.model_id.clone(),
            macro_auc: r.macro_auc,
            macro_f1: r.macro_f1,
            macro_precision: r.macro_precision,
            macro_recall: r.macro_recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelImportance {
    pub label: String,
    /// Highest gain shares first; empty when the forest never split.
    pub top: Vec<FeatureShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub seed: u64,
    pub n_samples: usize,
    pub n_features: usize,
    pub k_folds: usize,
    pub labels: Vec<String>,
    pub oof_width: usize,
    pub n_fit: usize,
    pub n_eval: usize,
    pub hyperparameters: Vec<HyperparameterRow>,
    /// One block per single model (OOF) followed by the meta-learner (hold-out).
    pub metrics: Vec<MetricBlock>,
    pub holdout_comparison: Vec<ComparisonRow>,
    pub importance: Vec<LabelImportance>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Block for `model_id` (`meta` for the meta-learner).
    pub fn block(&self, model_id: &str) -> Option<&MetricBlock> {
        self.metrics.iter().find(|b| b.block == model_id)
    }

    /// Best single-model OOF macro AUC.
    pub fn max_single_oof_auc(&self) -> Option<f64> {
        self.metrics
            .iter()
            .filter(|b| b.scope == EvalScope::Oof)
            .filter_map(|b| b.report.macro_auc)
            .max_by(f64::total_cmp)
    }

    pub fn meta_holdout_auc(&self) -> Option<f64> {
        self.block("meta").and_then(|b| b.report.macro_auc)
    }
}

pub fn build_report(run: &Run) -> Result<RunReport, PipelineError> {
    let config = run.config();
    let params = run.load_params()?;
    let evaluation = run.load_evaluation()?;
    let meta = run.load_meta()?;
    let top_k = config.importance_top_k;

    let hyperparameters = config
        .templates()
        .into_iter()
        .map(|t| {
            let tuned = params
                .get(&t.model_id)
                .ok_or_else(|| PipelineError::IncompleteRun(format!("no parameters for `{}`", t.model_id)))?;
            Ok(HyperparameterRow {
                model_id: t.model_id.clone(),
                hidden_units: t.hidden_units,
                feature_fraction: t.feature_fraction,
                learning_rate: tuned.params.learning_rate,
                weight_decay: tuned.params.weight_decay,
                dropout_rate: tuned.params.dropout_rate,
                source: tuned.source.clone(),
                best_trial: tuned.best_trial,
                best_value: tuned.best_value,
                n_trials: tuned.n_trials,
                n_pruned: tuned.n_pruned,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;

    let mut metrics: Vec<MetricBlock> = evaluation
        .singles_oof
        .iter()
        .map(|r| MetricBlock { block: r.model_id.clone(), scope: EvalScope::Oof, report: r.clone() })
        .collect();
    metrics.push(MetricBlock { block: "meta".into(), scope: EvalScope::Holdout, report: evaluation.meta_holdout.clone() });

    let holdout_comparison = evaluation
        .singles_holdout
        .iter()
        .chain(std::iter::once(&evaluation.meta_holdout))
        .map(ComparisonRow::from)
        .collect();

    let importance = meta
        .labels()
        .into_iter()
        .map(|label| {
            let top = match feature_importance(&meta, &label) {
                Ok(shares) => shares.into_iter().filter(|s| s.gain_share > 0.0).take(top_k).collect(),
                Err(StackingError::EmptyForest(_)) => Vec::new(),
                Err(e) => return Err(PipelineError::from(e)),
            };
            Ok(LabelImportance { label, top })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let inputs = run.inputs();
    Ok(RunReport {
        run_id: run.ledger().run_id.clone(),
        seed: config.seed,
        n_samples: inputs.truth.n_samples(),
        n_features: inputs.features.n_features(),
        k_folds: config.k_folds,
        labels: inputs.truth.labels().to_vec(),
        oof_width: meta.feature_names.len(),
        n_fit: evaluation.n_fit,
        n_eval: evaluation.n_eval,
        hyperparameters,
        metrics,
        holdout_comparison,
        importance,
    })
}
