//! Desk-scale base learners: linear or one-hidden-layer networks over a
//! per-model random subset of the input columns, trained with BCE-with-logits
//! and AdamW. After each epoch the validation macro-AUC is measured and the
//! best epoch's weights are kept.

mod loss;
mod network;
mod optim;

use std::ops::ControlFlow;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{bce_with_logits, sigmoid};
pub use network::{flatten, Dense, ForwardCache, Network};
pub use optim::{optimizer_step, AdamW, AdamWConfig, Moments};

use crate::features::FeatureMatrix;
use crate::manifest::BinaryLabelMatrix;
use crate::metrics::{macro_report, MetricsError};
use crate::predictions::{PredictionError, PredictionMatrix};
use crate::stratify::SplitView;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr={lr}, wd={weight_decay})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64, weight_decay: f64 },
    #[error("expected {expected} input features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("features and labels are not aligned: {0}")]
    Misaligned(String),
    #[error("validation split has no label with both classes")]
    DegenerateValidation,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_feature_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseLearnerSpec {
    pub model_id: String,
    /// 0 gives a linear model.
    pub hidden_units: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub feature_subset_seed: u64,
    #[serde(default = "default_feature_fraction")]
    pub feature_fraction: f64,
}

impl BaseLearnerSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(0.0..=0.6).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 0.6]", self.dropout_rate));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return bad(format!("feature_fraction {} outside (0, 1]", self.feature_fraction));
        }
        Ok(())
    }

    /// Input columns this model reads, ascending.
    pub fn feature_subset(&self, input_dim: usize) -> Vec<usize> {
        let keep = ((input_dim as f64 * self.feature_fraction).round() as usize).clamp(1, input_dim.max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(self.feature_subset_seed);
        let mut cols = index::sample(&mut rng, input_dim, keep).into_vec();
        cols.sort_unstable();
        cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseLearnerModel {
    pub spec: BaseLearnerSpec,
    pub labels: Vec<String>,
    pub network: Network,
    /// 0-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_macro_auc: f64,
    /// Validation macro-AUC after every epoch that ran.
    pub epoch_history: Vec<f64>,
}

impl BaseLearnerModel {
    pub fn input_dim(&self) -> usize {
        self.network.input_dim
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let model: Self = serde_json::from_str(text).map_err(|e| TrainError::Artifact(e.to_string()))?;
        if model.network.n_outputs() != model.labels.len() || !model.network.is_finite() {
            return Err(TrainError::Artifact("inconsistent or non-finite network".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Handed to the epoch observer after each validation pass.
#[derive(Debug)]
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_macro_auc: f64,
    pub valid_predictions: &'a PredictionMatrix,
}

fn targets_as_f64(truth: &BinaryLabelMatrix, rows: &[usize]) -> Array2<f64> {
    truth.values().select(Axis(0), rows).mapv(f64::from)
}

/// Mean loss and parameter gradients of `network` on one batch.
pub fn loss_and_gradients<R: rand::Rng>(
    network: &Network,
    x: &Array2<f64>,
    y: &Array2<f64>,
    dropout: Option<(f64, &mut R)>,
) -> (f64, Vec<Dense>) {
    let (logits, cache) = network.forward(x, dropout);
    let (loss, grad) = bce_with_logits(
        logits.as_slice().expect("standard layout"),
        y.as_standard_layout().as_slice().expect("standard layout"),
    );
    let d_logits = Array2::from_shape_vec(logits.raw_dim(), grad).expect("same shape");
    (loss, network.backward(&cache, &d_logits))
}

/// Trains on `view.train`, scores `view.valid` after every epoch and keeps the
/// best-scoring weights. The observer may stop training early.
pub fn train_fold_with<F>(
    spec: &BaseLearnerSpec,
    features: &FeatureMatrix,
    truth: &BinaryLabelMatrix,
    view: &SplitView,
    options: &TrainOptions,
    mut observer: F,
) -> Result<BaseLearnerModel, TrainError>
where
    F: FnMut(&EpochReport<'_>) -> ControlFlow<()>,
{
    spec.validate()?;
    options.validate()?;
    if features.sample_ids != truth.sample_ids() {
        return Err(TrainError::Misaligned("sample order differs".into()));
    }
    if view.train.is_empty() || view.valid.is_empty() {
        return Err(TrainError::InvalidConfig("empty train or validation split".into()));
    }
    let input_dim = features.n_features();
    let labels = truth.labels().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut network = Network::new(input_dim, spec.feature_subset(input_dim), spec.hidden_units, labels.len(), &mut rng);
    let mut optimizer = AdamW::new(AdamWConfig::new(spec.learning_rate, spec.weight_decay), &network.tensor_sizes());

    let valid_x = features.values.select(Axis(0), &view.valid);
    let valid_truth = truth.select_rows(&view.valid);
    let mut order = view.train.clone();
    let mut best: Option<(usize, f64, Network)> = None;
    let mut history = Vec::with_capacity(options.epochs);

    for epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, rows) in order.chunks(options.batch_size).enumerate() {
            let x = features.values.select(Axis(0), rows);
            let y = targets_as_f64(truth, rows);
            let (loss, grads) = loss_and_gradients(&network, &x, &y, Some((spec.dropout_rate, &mut rng)));
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch,
                    lr: spec.learning_rate,
                    weight_decay: spec.weight_decay,
                });
            }
            epoch_loss += loss * rows.len() as f64;
            network.apply_gradients(&mut optimizer, &grads);
        }

        let probs = network.logits(&valid_x).mapv(sigmoid);
        let preds = PredictionMatrix::new(&spec.model_id, valid_truth.sample_ids().to_vec(), labels.clone(), probs)?;
        let report = macro_report(&preds, &valid_truth, 0.5)?;
        let auc = report.macro_auc.ok_or(TrainError::DegenerateValidation)?;
        history.push(auc);
        if best.as_ref().is_none_or(|(_, b, _)| auc > *b) {
            best = Some((epoch, auc, network.clone()));
        }
        let flow = observer(&EpochReport {
            epoch,
            train_loss: epoch_loss / order.len() as f64,
            valid_macro_auc: auc,
            valid_predictions: &preds,
        });
        if flow.is_break() {
            break;
        }
    }

    let (best_epoch, best_macro_auc, network) = best.expect("at least one epoch ran");
    Ok(BaseLearnerModel { spec: spec.clone(), labels, network, best_epoch, best_macro_auc, epoch_history: history })
}

pub fn train_fold(
    spec: &BaseLearnerSpec,
    features: &FeatureMatrix,
    truth: &BinaryLabelMatrix,
    view: &SplitView,
    options: &TrainOptions,
) -> Result<BaseLearnerModel, TrainError> {
    train_fold_with(spec, features, truth, view, options, |_| ControlFlow::Continue(()))
}

/// Inference pass (no dropout): `sigmoid(logits)` per sample and label.
pub fn predict(model: &BaseLearnerModel, features: &FeatureMatrix) -> Result<PredictionMatrix, TrainError> {
    if features.n_features() != model.input_dim() {
        return Err(TrainError::DimensionMismatch { expected: model.input_dim(), actual: features.n_features() });
    }
    let probs = model.network.logits(&features.values).mapv(sigmoid);
    Ok(PredictionMatrix::new(&model.spec.model_id, features.sample_ids.clone(), model.labels.clone(), probs)?)
}
