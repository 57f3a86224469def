//! Exact binary and multilabel classification metrics.
//!
//! AUC is the normalized Mann-Whitney U statistic computed from mid-ranks, so
//! tied scores earn half credit. Macro averages are unweighted means over the
//! classes that have both positives and negatives; the rest are listed in
//! `skipped_labels`.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::BinaryLabelMatrix;
use crate::predictions::PredictionMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("class has {positives} positives and {negatives} negatives")]
    DegenerateClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Area under the stored points by the trapezoid rule.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    /// `fpr,tpr,threshold` rows. The leading point's threshold is `inf`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["fpr", "tpr", "threshold"])?;
        for p in &self.points {
            out.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// `None` when the class is degenerate.
    pub auc: Option<f64>,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub n_samples: usize,
    pub threshold: f64,
    pub per_class: Vec<LabelMetrics>,
    /// `None` when every evaluated class is degenerate.
    pub macro_auc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    /// Evaluated labels excluded from the macro means (single-class ground truth).
    pub skipped_labels: Vec<String>,
    /// Model outputs with no ground truth in the evaluated set.
    pub unmapped_labels: Vec<String>,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let positives = labels.iter().filter(|&&y| y != 0).count();
    Ok((positives, labels.len() - positives))
}

fn sorted_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    order
}

/// Twice the Mann-Whitney U of the positives, computed from mid-ranks.
///
/// Working with doubled ranks keeps every intermediate an integer.
fn doubled_u(scores: &[f64], labels: &[u8], positives: usize) -> u64 {
    let order = sorted_order(scores);
    let mut doubled_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share the mid-rank (start+1+end)/2.
        let doubled_mid = (start + 1 + end) as u64;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i] != 0).count() as u64;
        doubled_rank_sum += doubled_mid * tied_pos;
        start = end;
    }
    let p = positives as u64;
    doubled_rank_sum - p * (p + 1)
}

/// Probability that a random positive outscores a random negative, ties at 1/2.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateClass { positives, negatives });
    }
    let u2 = doubled_u(scores, labels, positives);
    Ok(u2 as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// ROC curve with one point per distinct score (descending), starting at (0, 0).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve, MetricsError> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateClass { positives, negatives });
    }
    let mut order = sorted_order(scores);
    order.reverse();

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    // Twice the trapezoid area in count units: sum of dfp * (tp_prev + tp).
    let mut doubled_area: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let threshold = scores[order[start]];
        let (tp_prev, fp_prev) = (tp, fp);
        let mut end = start;
        while end < order.len() && scores[order[end]] == threshold {
            if labels[order[end]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            end += 1;
        }
        doubled_area += ((fp - fp_prev) * (tp_prev + tp)) as u64;
        points.push(RocPoint { fpr: fp as f64 / n, tpr: tp as f64 / p, threshold });
        start = end;
    }
    Ok(RocCurve { points, auc: doubled_area as f64 / (2.0 * p * n) })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts and P/R/F1 at `score >= threshold`, plus AUC when defined.
pub fn class_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClassMetrics, MetricsError> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let degenerate = positives == 0 || negatives == 0;
    let auc = if degenerate { None } else { Some(auc(scores, labels)?) };
    Ok(ClassMetrics { auc, f1, precision, recall, tp, fp, tn, fn_, degenerate })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Per-class and macro metrics for every label in `truth`.
///
/// `truth` may cover a subset of the prediction labels (matched by name);
/// prediction labels without ground truth are listed in `unmapped_labels`.
/// Sample order must match exactly.
pub fn macro_report(
    pred: &PredictionMatrix,
    truth: &BinaryLabelMatrix,
    threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    if pred.sample_ids() != truth.sample_ids() {
        return Err(MetricsError::ShapeMismatch(format!(
            "prediction rows ({}) do not match ground-truth rows ({})",
            pred.n_samples(),
            truth.n_samples()
        )));
    }
    let mut per_class = Vec::with_capacity(truth.n_labels());
    for (t_col, label) in truth.labels().iter().enumerate() {
        let p_col = pred.labels().iter().position(|l| l == label).ok_or_else(|| {
            MetricsError::ShapeMismatch(format!("no prediction column for label `{label}`"))
        })?;
        let scores = pred.probs().column(p_col).to_vec();
        let labels = truth.column(t_col).to_vec();
        per_class.push(LabelMetrics { label: label.clone(), metrics: class_metrics(&scores, &labels, threshold)? });
    }
    let valid = || per_class.iter().filter(|c| !c.metrics.degenerate).map(|c| &c.metrics);
    Ok(MetricsReport {
        model_id: pred.model_id.clone(),
        n_samples: truth.n_samples(),
        threshold,
        macro_auc: mean(valid().filter_map(|m| m.auc)),
        macro_f1: mean(valid().map(|m| m.f1)),
        macro_precision: mean(valid().map(|m| m.precision)),
        macro_recall: mean(valid().map(|m| m.recall)),
        skipped_labels: per_class.iter().filter(|c| c.metrics.degenerate).map(|c| c.label.clone()).collect(),
        unmapped_labels: pred.labels().iter().filter(|l| !truth.labels().contains(l)).cloned().collect(),
        per_class,
    })
}

/// ROC curve for each non-degenerate label of `truth`, in truth order.
pub fn roc_curves(
    pred: &PredictionMatrix,
    truth: &BinaryLabelMatrix,
) -> Result<Vec<(String, RocCurve)>, MetricsError> {
    if pred.sample_ids() != truth.sample_ids() {
        return Err(MetricsError::ShapeMismatch("prediction and ground-truth rows differ".into()));
    }
    let mut curves = Vec::new();
    for (t_col, label) in truth.labels().iter().enumerate() {
        let Some(p_col) = pred.labels().iter().position(|l| l == label) else {
            return Err(MetricsError::ShapeMismatch(format!("no prediction column for label `{label}`")));
        };
        let scores = pred.probs().column(p_col).to_vec();
        let labels = truth.column(t_col).to_vec();
        match roc_curve(&scores, &labels) {
            Ok(curve) => curves.push((label.clone(), curve)),
            Err(MetricsError::DegenerateClass { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    /// O(n^2) pair counting.
    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut concordant, mut tied, mut pairs) = (0.0, 0.0, 0.0);
        for (i, &yi) in labels.iter().enumerate() {
            if yi == 0 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    tied += 1.0;
                }
            }
        }
        (concordant + 0.5 * tied) / pairs
    }

    #[test]
    fn perfect_separation() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        let roc = roc_curve(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert!(roc.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
    }

    #[test]
    fn all_tied_is_half() {
        assert_eq!(auc(&[0.3, 0.3], &[0, 1]).unwrap(), 0.5);
        let roc = roc_curve(&[0.3, 0.3], &[0, 1]).unwrap();
        assert_eq!(roc.points.len(), 2);
        assert_eq!(roc.trapezoid_area(), 0.5);
    }

    #[test]
    fn three_of_four_pairs() {
        let (s, y) = ([0.2, 0.4, 0.35, 0.8], [0, 0, 1, 1]);
        assert_eq!(brute_force_auc(&s, &y), 0.75);
        assert_eq!(auc(&s, &y).unwrap(), 0.75);
        let roc = roc_curve(&s, &y).unwrap();
        assert_eq!(roc.auc, 0.75);
        assert!((roc.trapezoid_area() - 0.75).abs() < 1e-12);
        assert_eq!(roc.points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(roc.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
    }

    #[test]
    fn degenerate_class() {
        assert_eq!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(MetricsError::DegenerateClass { positives: 2, negatives: 0 })
        );
        assert!(matches!(auc(&[0.1], &[1, 0]), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(auc(&[f64::NAN, 0.0], &[1, 0]), Err(MetricsError::NonFiniteScore(0))));
    }

    #[test]
    fn class_metrics_examples() {
        let perfect = class_metrics(&[0.9, 0.1, 0.8], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(perfect.f1, 1.0);

        // predictions [1,1,0,0] against labels [1,0,1,0]: tp=1 fp=1 fn=1 tn=1
        let m = class_metrics(&[0.9, 0.9, 0.1, 0.1], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 1, 1, 1));
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));

        let none = class_metrics(&[0.1, 0.2, 0.3], &[1, 1, 0], 0.5).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));

        let degenerate = class_metrics(&[0.1, 0.7], &[0, 0], 0.5).unwrap();
        assert!(degenerate.degenerate);
        assert_eq!(degenerate.auc, None);
        assert_eq!(degenerate.tp + degenerate.fp + degenerate.tn + degenerate.fn_, 2);
    }

    fn truth(values: Array2<u8>, labels: &[&str]) -> BinaryLabelMatrix {
        let ids = (0..values.nrows()).map(|i| format!("s{i}")).collect();
        BinaryLabelMatrix::new(ids, labels.iter().map(|s| s.to_string()).collect(), values).unwrap()
    }

    fn preds(probs: Array2<f64>, labels: &[&str]) -> PredictionMatrix {
        let ids = (0..probs.nrows()).map(|i| format!("s{i}")).collect();
        PredictionMatrix::new("m", ids, labels.iter().map(|s| s.to_string()).collect(), probs).unwrap()
    }

    #[test]
    fn macro_mean_and_skipping() {
        // label a: perfect; label b: all tied; label c: no positives.
        let y = ndarray::array![[1, 1, 0], [0, 0, 0], [1, 0, 0], [0, 1, 0]];
        let p = ndarray::array![[0.9, 0.5, 0.1], [0.1, 0.5, 0.2], [0.8, 0.5, 0.3], [0.2, 0.5, 0.4]];
        let report = macro_report(&preds(p, &["a", "b", "c"]), &truth(y, &["a", "b", "c"]), 0.5).unwrap();
        assert_eq!(report.macro_auc, Some(0.75));
        assert_eq!(report.skipped_labels, vec!["c"]);
        assert!(report.unmapped_labels.is_empty());
    }

    #[test]
    fn truth_subset_reports_unmapped() {
        let y = ndarray::array![[1], [0]];
        let p = ndarray::array![[0.9, 0.5], [0.1, 0.5]];
        let report = macro_report(&preds(p, &["a", "b"]), &truth(y, &["b"]), 0.5).unwrap();
        assert_eq!(report.unmapped_labels, vec!["a"]);
        assert_eq!(report.per_class.len(), 1);
        assert_eq!(report.macro_auc, Some(0.5));
    }

    #[test]
    fn shape_mismatch() {
        let y = ndarray::array![[1], [0], [1]];
        let p = ndarray::array![[0.9], [0.1]];
        assert!(matches!(
            macro_report(&preds(p, &["a"]), &truth(y, &["a"]), 0.5),
            Err(MetricsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn eleven_class_macro_is_mean_of_classes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let y = Array2::from_shape_fn((300, 11), |_| u8::from(rng.random_bool(0.3)));
        let p = Array2::from_shape_fn((300, 11), |(i, j)| {
            (0.5 * f64::from(y[[i, j]]) + rng.random::<f64>()).min(1.0) * 0.99
        });
        let labels: Vec<String> = (0..11).map(|i| format!("l{i}")).collect();
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let report = macro_report(&preds(p.clone(), &refs), &truth(y.clone(), &refs), 0.5).unwrap();
        let mut total = 0.0;
        for j in 0..11 {
            total += brute_force_auc(&p.column(j).to_vec(), &y.column(j).to_vec());
        }
        assert!((report.macro_auc.unwrap() - total / 11.0).abs() < 1e-12);
    }

    fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..120).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..20).prop_map(|v| f64::from(v) / 19.0), n),
                proptest::collection::vec(0u8..=1, n),
            )
        })
        .prop_filter("needs both classes", |(_, y)| y.contains(&0) && y.contains(&1))
    }

    proptest! {
        #[test]
        fn rank_auc_equals_pair_counting((s, y) in scored_labels()) {
            prop_assert_eq!(auc(&s, &y).unwrap(), brute_force_auc(&s, &y));
        }

        #[test]
        fn complement_sums_to_one((s, y) in scored_labels()) {
            let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
            let total = auc(&s, &y).unwrap() + auc(&s, &flipped).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance((s, y) in scored_labels()) {
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auc(&s, &y).unwrap(), auc(&t, &y).unwrap());
        }

        #[test]
        fn roc_area_matches_auc((s, y) in scored_labels()) {
            let roc = roc_curve(&s, &y).unwrap();
            prop_assert!((roc.trapezoid_area() - auc(&s, &y).unwrap()).abs() < 1e-12);
            for w in roc.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
            let last = roc.points.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        }

        #[test]
        fn macro_invariant_to_label_permutation(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y = Array2::from_shape_fn((40, 4), |_| u8::from(rng.random_bool(0.4)));
            let p = Array2::from_shape_fn((40, 4), |_| rng.random::<f64>());
            let names = ["a", "b", "c", "d"];
            let base = macro_report(&preds(p.clone(), &names), &truth(y.clone(), &names), 0.5).unwrap();
            let perm = [2usize, 0, 3, 1];
            let pn: Vec<&str> = perm.iter().map(|&i| names[i]).collect();
            let permuted = macro_report(
                &preds(p.select(ndarray::Axis(1), &perm), &pn),
                &truth(y.select(ndarray::Axis(1), &perm), &pn),
                0.5,
            ).unwrap();
            let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                (a, b) => a == b,
            };
            prop_assert!(close(base.macro_auc, permuted.macro_auc));
            prop_assert!(close(base.macro_f1, permuted.macro_f1));
        }
    }
}
