//! Per-feature attributions for one output logit of a base learner:
//! gradient saliency, integrated gradients and occlusion. All of them run the
//! network without dropout.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trainer::BaseLearnerModel;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("expected {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("model has no output label `{0}`")]
    UnknownLabel(String),
    #[error("occlusion window {0} is empty")]
    EmptyWindow(usize),
    #[error("feature {0} is not covered by any occlusion window")]
    UncoveredFeature(usize),
    #[error("integrated gradients needs at least one step")]
    ZeroSteps,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Saliency,
    IntegratedGradients,
    Occlusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub sample_id: String,
    pub label: String,
    pub method: AttributionMethod,
    /// One score per input feature.
    pub scores: Vec<f64>,
    /// Integrated-gradients baseline, or the occlusion fill vector.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

fn resolve(model: &BaseLearnerModel, x: &[f64], label: &str) -> Result<usize, ExplainError> {
    if x.len() != model.input_dim() {
        return Err(ExplainError::DimensionMismatch { expected: model.input_dim(), actual: x.len() });
    }
    model.label_index(label).ok_or_else(|| ExplainError::UnknownLabel(label.into()))
}

/// `|∂ logit / ∂ x_j|`.
pub fn saliency(model: &BaseLearnerModel, sample_id: &str, x: &[f64], label: &str) -> Result<AttributionMap, ExplainError> {
    let out = resolve(model, x, label)?;
    let scores = model.network.input_gradient(x, out).into_iter().map(f64::abs).collect();
    Ok(AttributionMap {
        sample_id: sample_id.into(),
        label: label.into(),
        method: AttributionMethod::Saliency,
        scores,
        baseline: None,
        steps: None,
    })
}

/// Midpoint Riemann sum of the path integral from `baseline` to `x`:
/// `(x_j − b_j) · mean_k ∂logit/∂x_j (b + (k − ½)/steps · (x − b))`.
pub fn integrated_gradients(
    model: &BaseLearnerModel,
    sample_id: &str,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
    label: &str,
) -> Result<AttributionMap, ExplainError> {
    let out = resolve(model, x, label)?;
    if baseline.len() != x.len() {
        return Err(ExplainError::DimensionMismatch { expected: x.len(), actual: baseline.len() });
    }
    if steps == 0 {
        return Err(ExplainError::ZeroSteps);
    }
    let mut sum = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        for ((p, &xi), &bi) in point.iter_mut().zip(x).zip(baseline) {
            *p = bi + alpha * (xi - bi);
        }
        for (s, g) in sum.iter_mut().zip(model.network.input_gradient(&point, out)) {
            *s += g;
        }
    }
    let scores = sum.iter().zip(x).zip(baseline).map(|((s, xi), bi)| (xi - bi) * s / steps as f64).collect();
    Ok(AttributionMap {
        sample_id: sample_id.into(),
        label: label.into(),
        method: AttributionMethod::IntegratedGradients,
        scores,
        baseline: Some(baseline.to_vec()),
        steps: Some(steps),
    })
}

/// One window per feature.
pub fn single_feature_windows(n_features: usize) -> Vec<Vec<usize>> {
    (0..n_features).map(|j| vec![j]).collect()
}

/// For every window, `logit(x) − logit(x with the window set to fill)`;
/// a feature's score is the mean over the windows that contain it.
pub fn occlusion(
    model: &BaseLearnerModel,
    sample_id: &str,
    x: &[f64],
    label: &str,
    windows: &[Vec<usize>],
    fill: &[f64],
) -> Result<AttributionMap, ExplainError> {
    let out = resolve(model, x, label)?;
    if fill.len() != x.len() {
        return Err(ExplainError::DimensionMismatch { expected: x.len(), actual: fill.len() });
    }
    let reference = model.network.logit(x, out);
    let mut total = vec![0.0; x.len()];
    let mut hits = vec![0usize; x.len()];
    let mut occluded = x.to_vec();
    for (w, window) in windows.iter().enumerate() {
        if window.is_empty() {
            return Err(ExplainError::EmptyWindow(w));
        }
        if let Some(&bad) = window.iter().find(|&&j| j >= x.len()) {
            return Err(ExplainError::DimensionMismatch { expected: x.len(), actual: bad + 1 });
        }
        for &j in window {
            occluded[j] = fill[j];
        }
        let delta = reference - model.network.logit(&occluded, out);
        for &j in window {
            occluded[j] = x[j];
            total[j] += delta;
            hits[j] += 1;
        }
    }
    if let Some(j) = hits.iter().position(|&h| h == 0) {
        return Err(ExplainError::UncoveredFeature(j));
    }
    let scores = total.iter().zip(&hits).map(|(t, &h)| t / h as f64).collect();
    Ok(AttributionMap {
        sample_id: sample_id.into(),
        label: label.into(),
        method: AttributionMethod::Occlusion,
        scores,
        baseline: Some(fill.to_vec()),
        steps: None,
    })
}

/// `# {json header}` line, then `feature_index,feature_name,score` rows.
pub fn write_attribution_csv<W: Write>(map: &AttributionMap, feature_names: &[String], mut writer: W) -> Result<(), ExplainError> {
    let header = serde_json::json!({
        "sample_id": map.sample_id,
        "label": map.label,
        "method": map.method,
        "baseline": map.baseline,
        "steps": map.steps,
    });
    writeln!(writer, "# {header}")?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature_index", "feature_name", "score"])?;
    for (j, score) in map.scores.iter().enumerate() {
        let name = feature_names.get(j).map_or("", String::as_str);
        w.write_record([j.to_string().as_str(), name, &score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
