//! Out-of-fold stacking: base-model validation predictions are concatenated
//! into one `model:label` feature row per sample, and a separate boosted
//! forest per output label is fit on those rows.

pub mod gbdt;

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gbdt::{
    find_best_split, fit_gbdt, fit_tree, forest_margin, leaf_value, logistic_loss, midpoint, split_gain, BoostResult,
    ColumnData, GbdtParams, GbdtTree, SplitCandidate, TreeNode,
};

use crate::manifest::BinaryLabelMatrix;
use crate::predictions::{read_float_table, write_float_table, PredictionError, PredictionMatrix};
use crate::stratify::{stratified_subset, FoldAssignment, StratifyError};
use crate::trainer::sigmoid;

#[derive(Debug, Error)]
pub enum StackingError {
    #[error("no prediction for model `{model_id}` on fold {fold}")]
    MissingFoldPrediction { model_id: String, fold: usize },
    #[error("sample `{0}` has no out-of-fold prediction")]
    CoverageGap(String),
    #[error("sample `{sample_id}` was in the training split of model `{model_id}` for fold {fold}")]
    LeakageDetected { sample_id: String, model_id: String, fold: usize },
    #[error("sample `{0}` is not in the fold assignment")]
    UnknownSample(String),
    #[error("label `{label}` missing from predictions of model `{model_id}`")]
    MissingLabel { model_id: String, label: String },
    #[error("expected {expected} meta features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("feature names differ from the ones the meta model was fit on")]
    FeatureMismatch,
    #[error("rows of the OOF matrix and the ground truth differ")]
    Misaligned,
    #[error("label `{0}` has no split gain to rank")]
    EmptyForest(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed OOF file: {0}")]
    Format(String),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Stratify(#[from] StratifyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Name of the meta feature for `label` as predicted by `model_id`.
pub fn feature_name(model_id: &str, label: &str) -> String {
    format!("{model_id}:{label}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct OofMatrix {
    pub sample_ids: Vec<String>,
    /// `model:label`, model-major.
    pub feature_names: Vec<String>,
    pub values: Array2<f64>,
}

impl OofMatrix {
    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            feature_names: self.feature_names.clone(),
            values: self.values.select(Axis(0), rows),
        }
    }

    /// Columns of one base model, named by label only.
    pub fn model_predictions(&self, model_id: &str) -> Result<PredictionMatrix, StackingError> {
        let prefix = format!("{model_id}:");
        let cols: Vec<usize> =
            self.feature_names.iter().enumerate().filter(|(_, n)| n.starts_with(&prefix)).map(|(i, _)| i).collect();
        let labels = cols.iter().map(|&c| self.feature_names[c][prefix.len()..].to_string()).collect();
        Ok(PredictionMatrix::new(model_id, self.sample_ids.clone(), labels, self.values.select(Axis(1), &cols))?)
    }

    /// Distinct model ids in column order.
    pub fn model_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in &self.feature_names {
            let model = name.rsplit_once(':').map_or(name.as_str(), |(m, _)| m);
            if out.last().is_none_or(|m| m != model) {
                out.push(model.to_string());
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<(), StackingError> {
        Ok(write_float_table(writer, &self.sample_ids, &self.feature_names, &self.values)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StackingError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self, StackingError> {
        let (sample_ids, feature_names, values) = read_float_table(reader)?;
        if let Some(bad) = feature_names.iter().find(|n| !n.contains(':')) {
            return Err(StackingError::Format(format!("column `{bad}` is not `model:label`")));
        }
        Ok(Self { sample_ids, feature_names, values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StackingError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Builds the OOF matrix from each model's per-fold validation predictions.
/// Rows follow `folds`; columns are `model_ids` × `labels`. A prediction for
/// fold `f` may only contain samples assigned to fold `f`.
pub fn assemble_oof(
    model_ids: &[String],
    labels: &[String],
    predictions: &HashMap<(String, usize), PredictionMatrix>,
    folds: &FoldAssignment,
) -> Result<OofMatrix, StackingError> {
    let index: HashMap<&str, usize> =
        folds.sample_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let n = folds.len();
    let width = model_ids.len() * labels.len();
    let mut values = Array2::<f64>::zeros((n, width));
    let mut feature_names = Vec::with_capacity(width);
    for (m, model_id) in model_ids.iter().enumerate() {
        feature_names.extend(labels.iter().map(|l| feature_name(model_id, l)));
        let mut filled = vec![false; n];
        for fold in 0..folds.k() {
            let pred = predictions
                .get(&(model_id.clone(), fold))
                .ok_or_else(|| StackingError::MissingFoldPrediction { model_id: model_id.clone(), fold })?;
            let cols = labels
                .iter()
                .map(|l| {
                    pred.labels().iter().position(|p| p == l).ok_or_else(|| StackingError::MissingLabel {
                        model_id: model_id.clone(),
                        label: l.clone(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            for (r, sample_id) in pred.sample_ids().iter().enumerate() {
                let &row = index.get(sample_id.as_str()).ok_or_else(|| StackingError::UnknownSample(sample_id.clone()))?;
                if folds.fold_of()[row] != fold || filled[row] {
                    return Err(StackingError::LeakageDetected {
                        sample_id: sample_id.clone(),
                        model_id: model_id.clone(),
                        fold,
                    });
                }
                filled[row] = true;
                for (j, &c) in cols.iter().enumerate() {
                    values[[row, m * labels.len() + j]] = pred.probs()[[r, c]];
                }
            }
        }
        if let Some(row) = filled.iter().position(|f| !f) {
            return Err(StackingError::CoverageGap(folds.sample_ids()[row].clone()));
        }
    }
    Ok(OofMatrix { sample_ids: folds.sample_ids().to_vec(), feature_names, values })
}

#[derive(Debug, Clone)]
pub struct HoldoutParts {
    pub fit: OofMatrix,
    pub fit_truth: BinaryLabelMatrix,
    pub eval: OofMatrix,
    pub eval_truth: BinaryLabelMatrix,
}

/// Stratified split of the OOF rows; roughly `fraction` of them form the
/// evaluation part.
pub fn holdout_split(
    oof: &OofMatrix,
    truth: &BinaryLabelMatrix,
    fraction: f64,
    seed: u64,
) -> Result<HoldoutParts, StackingError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(StackingError::InvalidConfig(format!("hold-out fraction {fraction} outside (0, 1)")));
    }
    if oof.sample_ids != truth.sample_ids() {
        return Err(StackingError::Misaligned);
    }
    let view = stratified_subset(truth, fraction, seed)?;
    Ok(HoldoutParts {
        fit: oof.select_rows(&view.train),
        fit_truth: truth.select_rows(&view.train),
        eval: oof.select_rows(&view.valid),
        eval_truth: truth.select_rows(&view.valid),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelForest {
    pub label: String,
    pub trees: Vec<GbdtTree>,
    /// Set when the fit targets had a single class; the label is then
    /// predicted at this prevalence.
    pub degenerate_prevalence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtMetaLearner {
    pub feature_names: Vec<String>,
    pub base_score: f64,
    pub params: GbdtParams,
    pub forests: Vec<LabelForest>,
}

impl GbdtMetaLearner {
    pub fn labels(&self) -> Vec<String> {
        self.forests.iter().map(|f| f.label.clone()).collect()
    }

    pub fn degenerate_labels(&self) -> Vec<String> {
        self.forests.iter().filter(|f| f.degenerate_prevalence.is_some()).map(|f| f.label.clone()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("meta model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, StackingError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StackingError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StackingError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One independent forest per label of `truth`, fit concurrently. Columns
/// are fit in name order, so equal-gain ties resolve to the feature whose
/// name sorts first and the result does not depend on column order.
pub fn fit_meta(
    oof: &OofMatrix,
    truth: &BinaryLabelMatrix,
    params: &GbdtParams,
    base_score: f64,
) -> Result<GbdtMetaLearner, StackingError> {
    params.validate().map_err(StackingError::InvalidConfig)?;
    if oof.sample_ids != truth.sample_ids() {
        return Err(StackingError::Misaligned);
    }
    let mut by_name: Vec<usize> = (0..oof.width()).collect();
    by_name.sort_by(|&a, &b| oof.feature_names[a].cmp(&oof.feature_names[b]));
    if by_name.windows(2).any(|w| oof.feature_names[w[0]] == oof.feature_names[w[1]]) {
        return Err(StackingError::Format("duplicate feature names".into()));
    }
    let data = ColumnData::from_rows(&oof.values.select(Axis(1), &by_name));
    let restore = |mut tree: GbdtTree| {
        for node in &mut tree.nodes {
            if let TreeNode::Split { feature, .. } = node {
                *feature = by_name[*feature];
            }
        }
        tree
    };
    let forests = truth
        .labels()
        .par_iter()
        .enumerate()
        .map(|(l, label)| {
            let targets: Vec<u8> = truth.column(l).to_vec();
            let positives = targets.iter().filter(|&&t| t == 1).count();
            if positives == 0 || positives == targets.len() {
                log::warn!("meta label `{label}` has a single class in the fit split; predicting prevalence");
                let prevalence = positives as f64 / targets.len().max(1) as f64;
                return LabelForest { label: label.clone(), trees: Vec::new(), degenerate_prevalence: Some(prevalence) };
            }
            let fit = fit_gbdt(&data, &targets, params, base_score);
            LabelForest { label: label.clone(), trees: fit.trees.into_iter().map(restore).collect(), degenerate_prevalence: None }
        })
        .collect();
    Ok(GbdtMetaLearner { feature_names: oof.feature_names.clone(), base_score, params: *params, forests })
}

/// Probabilities `sigmoid(base_score + Σ trees)` per sample and label.
pub fn predict_meta(model: &GbdtMetaLearner, features: &OofMatrix) -> Result<PredictionMatrix, StackingError> {
    if features.width() != model.feature_names.len() {
        return Err(StackingError::DimensionMismatch { expected: model.feature_names.len(), actual: features.width() });
    }
    if features.feature_names != model.feature_names {
        return Err(StackingError::FeatureMismatch);
    }
    let n = features.n_samples();
    let mut probs = Array2::<f64>::zeros((n, model.forests.len()));
    for (i, row) in features.values.rows().into_iter().enumerate() {
        let row = row.to_vec();
        for (l, forest) in model.forests.iter().enumerate() {
            probs[[i, l]] = match forest.degenerate_prevalence {
                Some(p) => p,
                None => sigmoid(forest_margin(&forest.trees, model.base_score, &row)),
            };
        }
    }
    Ok(PredictionMatrix::new("meta", features.sample_ids.clone(), model.labels(), probs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureShare {
    pub feature: String,
    pub gain_share: f64,
}

/// Total split gain per feature in `label`'s forest, normalized to sum to 1,
/// descending (ties by feature index). Unused features get share 0.
pub fn feature_importance(model: &GbdtMetaLearner, label: &str) -> Result<Vec<FeatureShare>, StackingError> {
    let forest =
        model.forests.iter().find(|f| f.label == label).ok_or_else(|| StackingError::UnknownLabel(label.into()))?;
    let mut totals = vec![0.0; model.feature_names.len()];
    for (feature, gain) in forest.trees.iter().flat_map(GbdtTree::splits) {
        totals[feature] += gain;
    }
    let sum: f64 = totals.iter().sum();
    if sum <= 0.0 {
        return Err(StackingError::EmptyForest(label.into()));
    }
    let mut order: Vec<usize> = (0..totals.len()).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .map(|f| FeatureShare { feature: model.feature_names[f].clone(), gain_share: totals[f] / sum })
        .collect())
}

/// `feature,gain_share` rows, at most `top_k` of them.
pub fn write_importance_csv<W: Write>(shares: &[FeatureShare], top_k: usize, writer: W) -> Result<(), StackingError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature", "gain_share"]).map_err(|e| StackingError::Format(e.to_string()))?;
    for s in shares.iter().take(top_k) {
        w.write_record([s.feature.as_str(), &s.gain_share.to_string()]).map_err(|e| StackingError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn fold_preds(
        model: &str,
        folds: &FoldAssignment,
        labels: &[String],
        value: impl Fn(usize, usize) -> f64,
    ) -> HashMap<(String, usize), PredictionMatrix> {
        (0..folds.k())
            .map(|f| {
                let rows = folds.split_views(f).unwrap().valid;
                let probs = Array2::from_shape_fn((rows.len(), labels.len()), |(i, l)| value(rows[i], l));
                let ids = rows.iter().map(|&r| folds.sample_ids()[r].clone()).collect();
                ((model.to_string(), f), PredictionMatrix::new(model, ids, labels.to_vec(), probs).unwrap())
            })
            .collect()
    }

    #[test]
    fn minimal_assembly_concatenates_halves() {
        let folds = FoldAssignment::new(ids(4), vec![0, 1, 1, 0], 2).unwrap();
        let labels = vec!["a".to_string()];
        let preds = fold_preds("m", &folds, &labels, |r, _| r as f64 / 10.0);
        let oof = assemble_oof(&["m".into()], &labels, &preds, &folds).unwrap();
        assert_eq!(oof.width(), 1);
        assert_eq!(oof.feature_names, vec!["m:a"]);
        assert_eq!(oof.values.column(0).to_vec(), vec![0.0, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn width_is_models_times_labels() {
        let folds = FoldAssignment::new(ids(100), (0..100).map(|i| i % 5).collect(), 5).unwrap();
        let labels: Vec<String> = (0..11).map(|l| format!("l{l}")).collect();
        let models: Vec<String> = (0..6).map(|m| format!("m{m}")).collect();
        let mut preds = HashMap::new();
        for m in &models {
            preds.extend(fold_preds(m, &folds, &labels, |_, _| 0.5));
        }
        let oof = assemble_oof(&models, &labels, &preds, &folds).unwrap();
        assert_eq!(oof.values.dim(), (100, 66));
        assert_eq!(oof.feature_names[11], "m1:l0");
        assert_eq!(oof.model_ids(), models);
    }

    #[test]
    fn training_sample_in_fold_file_is_leakage() {
        let folds = FoldAssignment::new(ids(4), vec![0, 1, 1, 0], 2).unwrap();
        let labels = vec!["a".to_string()];
        let mut preds = fold_preds("m", &folds, &labels, |_, _| 0.5);
        // fold 0's file now also scores s1, which fold 0's model trained on
        let bad = PredictionMatrix::new("m", vec!["s0".into(), "s3".into(), "s1".into()], labels.clone(), Array2::from_elem((3, 1), 0.5)).unwrap();
        preds.insert(("m".into(), 0), bad);
        let err = assemble_oof(&["m".into()], &labels, &preds, &folds).unwrap_err();
        assert!(matches!(err, StackingError::LeakageDetected { ref sample_id, .. } if sample_id == "s1"));
    }

    #[test]
    fn missing_fold_and_coverage_gap() {
        let folds = FoldAssignment::new(ids(4), vec![0, 1, 1, 0], 2).unwrap();
        let labels = vec!["a".to_string()];
        let mut preds = fold_preds("m", &folds, &labels, |_, _| 0.5);
        let short = PredictionMatrix::new("m", vec!["s0".into()], labels.clone(), Array2::from_elem((1, 1), 0.5)).unwrap();
        preds.insert(("m".into(), 0), short);
        assert!(matches!(assemble_oof(&["m".into()], &labels, &preds, &folds), Err(StackingError::CoverageGap(s)) if s == "s3"));
        preds.remove(&("m".to_string(), 1));
        assert!(matches!(
            assemble_oof(&["m".into()], &labels, &preds, &folds),
            Err(StackingError::MissingFoldPrediction { fold: 1, .. })
        ));
    }

    fn toy(n: usize, seed: u64) -> (OofMatrix, BinaryLabelMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array2::from_shape_fn((n, 2), |_| u8::from(rng.random::<f64>() < 0.3));
        let x = Array2::from_shape_fn((n, 4), |(i, j)| {
            let signal = f64::from(y[[i, j % 2]]);
            (0.6 * signal + 0.7 * rng.random::<f64>()).min(1.0)
        });
        let names = vec!["p:a".into(), "p:b".into(), "q:a".into(), "q:b".into()];
        (
            OofMatrix { sample_ids: ids(n), feature_names: names, values: x },
            BinaryLabelMatrix::new(ids(n), vec!["a".into(), "b".into()], y).unwrap(),
        )
    }

    #[test]
    fn holdout_quarter_and_halves() {
        let (oof, truth) = toy(200, 1);
        let parts = holdout_split(&oof, &truth, 0.25, 3).unwrap();
        assert_eq!(parts.eval.n_samples(), 50);
        assert_eq!(parts.fit.n_samples() + parts.eval.n_samples(), 200);
        let halves = holdout_split(&oof, &truth, 0.5, 3).unwrap();
        assert!(halves.eval.n_samples().abs_diff(100) <= 1);
        assert!(holdout_split(&oof, &truth, 1.0, 3).is_err());
    }

    #[test]
    fn meta_fit_predict_and_round_trip() {
        let (oof, truth) = toy(300, 2);
        let params = GbdtParams { rounds: 20, ..GbdtParams::default() };
        let meta = fit_meta(&oof, &truth, &params, 0.0).unwrap();
        assert_eq!(meta.forests.len(), 2);
        let p = predict_meta(&meta, &oof).unwrap();
        let back = GbdtMetaLearner::from_json(&meta.to_json()).unwrap();
        assert_eq!(back, meta);
        assert_eq!(predict_meta(&back, &oof).unwrap(), p);
        let halves = [oof.select_rows(&(0..150).collect::<Vec<_>>()), oof.select_rows(&(150..300).collect::<Vec<_>>())];
        let stitched: Vec<f64> =
            halves.iter().flat_map(|h| predict_meta(&meta, h).unwrap().probs().iter().copied().collect::<Vec<_>>()).collect();
        assert_eq!(stitched, p.probs().iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_label_predicted_at_prevalence() {
        let (oof, truth) = toy(50, 3);
        let mut y = truth.values().clone();
        y.column_mut(1).fill(0);
        let truth = BinaryLabelMatrix::new(truth.sample_ids().to_vec(), truth.labels().to_vec(), y).unwrap();
        let meta = fit_meta(&oof, &truth, &GbdtParams { rounds: 3, ..GbdtParams::default() }, 0.0).unwrap();
        assert_eq!(meta.degenerate_labels(), vec!["b"]);
        assert!(predict_meta(&meta, &oof).unwrap().probs().column(1).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn empty_forests_predict_half() {
        let (oof, truth) = toy(40, 4);
        let meta = fit_meta(&oof, &truth, &GbdtParams { rounds: 0, ..GbdtParams::default() }, 0.0).unwrap();
        assert!(predict_meta(&meta, &oof).unwrap().probs().iter().all(|&p| p == 0.5));
        assert!(matches!(feature_importance(&meta, "a"), Err(StackingError::EmptyForest(_))));
    }

    #[test]
    fn column_permutation_commutes_with_fit() {
        let (oof, truth) = toy(200, 5);
        let perm = [2usize, 0, 3, 1];
        let permuted = OofMatrix {
            sample_ids: oof.sample_ids.clone(),
            feature_names: perm.iter().map(|&p| oof.feature_names[p].clone()).collect(),
            values: oof.values.select(Axis(1), &perm),
        };
        let params = GbdtParams { rounds: 15, ..GbdtParams::default() };
        let a = predict_meta(&fit_meta(&oof, &truth, &params, 0.0).unwrap(), &oof).unwrap();
        let b = predict_meta(&fit_meta(&permuted, &truth, &params, 0.0).unwrap(), &permuted).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

    #[test]
    fn importance_shares_sum_to_one() {
        let (oof, truth) = toy(300, 6);
        let meta = fit_meta(&oof, &truth, &GbdtParams { rounds: 10, ..GbdtParams::default() }, 0.0).unwrap();
        for label in ["a", "b"] {
            let shares = feature_importance(&meta, label).unwrap();
            assert_eq!(shares.len(), 4);
            let total: f64 = shares.iter().map(|s| s.gain_share).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(shares.windows(2).all(|w| w[0].gain_share >= w[1].gain_share && w[1].gain_share >= 0.0));
        }
        let single = GbdtMetaLearner {
            feature_names: vec!["x:a".into(), "y:a".into()],
            base_score: 0.0,
            params: GbdtParams::default(),
            forests: vec![LabelForest {
                label: "a".into(),
                trees: vec![GbdtTree {
                    nodes: vec![
                        TreeNode::Split { feature: 1, threshold: 0.5, gain: 3.0, left: 1, right: 2 },
                        TreeNode::Leaf { value: -1.0 },
                        TreeNode::Leaf { value: 1.0 },
                    ],
                }],
                degenerate_prevalence: None,
            }],
        };
        let shares = feature_importance(&single, "a").unwrap();
        assert_eq!(shares[0], FeatureShare { feature: "y:a".into(), gain_share: 1.0 });
        assert_eq!(shares[1].gain_share, 0.0);
    }

    #[test]
    fn oof_csv_round_trip() {
        let (oof, _) = toy(30, 7);
        let mut buf = Vec::new();
        oof.write_to(&mut buf).unwrap();
        assert_eq!(OofMatrix::read_from(buf.as_slice()).unwrap(), oof);
    }
}
