//! Synthetic multilabel benchmark with a latent-factor generative process.
//!
//! Each label has a standard-normal liability
//! `u_l = sqrt(c) * a_l . z + sqrt(1 - c) * e_l`, where `z` holds the shared
//! factors, `a_l` is a unit-norm non-negative loading vector and `c` is the
//! co-occurrence strength. A label is present when its liability exceeds the
//! `1 - prevalence` normal quantile. Informative features are noisy copies of
//! one liability each; the remaining columns are pure noise.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::config::{default_templates, ModelTemplate, PipelineConfig};
use crate::features::FeatureMatrix;
use crate::manifest::{Manifest, ManifestError};
use crate::predictions::PredictionError;
use crate::schema::{LabelKind, LabelSchema, CANONICAL_LABELS};
use crate::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Features(#[from] PredictionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBenchmarkSpec {
    pub n_samples: usize,
    /// Labels are the first `n_labels` canonical labels.
    pub n_labels: usize,
    pub n_features: usize,
    /// One entry per label, each in (0, 1).
    pub prevalence: Vec<f64>,
    /// Share of liability variance from the shared factors, in [0, 1).
    pub co_occurrence: f64,
    pub n_factors: usize,
    pub informative_per_label: usize,
    /// Standard deviation of the noise added to informative features.
    pub feature_noise: f64,
    pub n_models: usize,
    /// Feature-subset seed per simulated model; empty derives them from the run seed.
    pub model_seeds: Vec<u64>,
}

pub const DEFAULT_PREVALENCE: [f64; 11] = [0.12, 0.10, 0.15, 0.20, 0.10, 0.25, 0.10, 0.15, 0.20, 0.12, 0.10];

impl Default for SyntheticBenchmarkSpec {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            n_labels: 11,
            n_features: 48,
            prevalence: DEFAULT_PREVALENCE.to_vec(),
            co_occurrence: 0.3,
            n_factors: 2,
            informative_per_label: 3,
            feature_noise: 1.5,
            n_models: 6,
            model_seeds: Vec::new(),
        }
    }
}

impl SyntheticBenchmarkSpec {
    /// Default spec resized to `n_labels`, with every prevalence set to `p`.
    pub fn uniform(n_samples: usize, n_labels: usize, p: f64) -> Self {
        Self { n_samples, n_labels, prevalence: vec![p; n_labels], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::InvalidSpec(m));
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if self.n_labels == 0 || self.n_labels > CANONICAL_LABELS.len() {
            return bad(format!("n_labels must be in 1..={}, got {}", CANONICAL_LABELS.len(), self.n_labels));
        }
        if self.prevalence.len() != self.n_labels {
            return bad(format!("{} prevalences for {} labels", self.prevalence.len(), self.n_labels));
        }
        if let Some(p) = self.prevalence.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return bad(format!("prevalence must be in (0, 1), got {p}"));
        }
        if !(0.0..1.0).contains(&self.co_occurrence) {
            return bad(format!("co_occurrence must be in [0, 1), got {}", self.co_occurrence));
        }
        if self.n_factors == 0 {
            return bad("n_factors must be at least 1".into());
        }
        if self.n_features < self.n_labels * self.informative_per_label {
            return bad(format!(
                "{} features cannot hold {} informative columns",
                self.n_features,
                self.n_labels * self.informative_per_label
            ));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and non-negative".into());
        }
        if self.n_models < 2 {
            return bad(format!("an ensemble needs at least 2 models, got {}", self.n_models));
        }
        if !self.model_seeds.is_empty() && self.model_seeds.len() != self.n_models {
            return bad(format!("{} model seeds for {} models", self.model_seeds.len(), self.n_models));
        }
        Ok(())
    }

    pub fn schema(&self) -> LabelSchema {
        LabelSchema::canonical().subset(&CANONICAL_LABELS[..self.n_labels]).expect("canonical prefix")
    }

    /// Base-learner templates for the simulated models, with feature-subset
    /// seeds taken from `model_seeds` (or derived from `seed`).
    pub fn model_templates(&self, seed: u64) -> Vec<ModelTemplate> {
        default_templates(self.n_models)
            .into_iter()
            .enumerate()
            .map(|(i, mut t)| {
                let s = self.model_seeds.get(i).copied().unwrap_or_else(|| derive_seed(seed, &format!("model-{i}")));
                t.feature_subset_seed = Some(s);
                t
            })
            .collect()
    }

    /// Pipeline config for this benchmark. Base learners use the bundled
    /// reference hyperparameters: at this scale a search trial gets about 30
    /// optimizer steps, too few to separate learning rates below 3e-4.
    pub fn pipeline_config(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            n_labels: self.n_labels,
            n_models: self.n_models,
            tune: false,
            models: self.model_templates(seed),
            ..PipelineConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub manifest: Manifest,
    pub features: FeatureMatrix,
    /// Label each feature column carries signal for; `None` for distractors.
    pub informative: Vec<Option<String>>,
}

/// Grade for a positive graded label from its liability excess over the threshold.
fn grade(excess: f64, max_grade: u8) -> u8 {
    let steps = (excess / 0.5).floor().max(0.0) as u64;
    (1 + steps).min(u64::from(max_grade)) as u8
}

pub fn simulate(spec: &SyntheticBenchmarkSpec, seed: u64) -> Result<SyntheticBenchmark, SimulateError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "simulate"));
    let (n, l, d, k) = (spec.n_samples, spec.n_labels, spec.n_features, spec.n_factors);

    let loadings: Vec<Array1<f64>> = (0..l)
        .map(|_| {
            let a: Array1<f64> = Array1::from_shape_fn(k, |_| rng.random_range(0.1..1.0));
            let norm = a.dot(&a).sqrt();
            a / norm
        })
        .collect();
    let normal = Normal::standard();
    let thresholds: Vec<f64> = spec.prevalence.iter().map(|p| normal.inverse_cdf(1.0 - p)).collect();

    // Informative columns are scattered over the feature axis.
    let mut owner: Vec<Option<usize>> = (0..d).map(|j| (j < l * spec.informative_per_label).then_some(j % l)).collect();
    owner.shuffle(&mut rng);

    let (shared, own) = (spec.co_occurrence.sqrt(), (1.0 - spec.co_occurrence).sqrt());
    let schema = spec.schema();
    let mut raw = Array2::<u8>::zeros((n, l));
    let mut values = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let z = Array1::from_shape_fn(k, |_| rng.sample::<f64, _>(StandardNormal));
        let liability: Vec<f64> =
            (0..l).map(|c| shared * loadings[c].dot(&z) + own * rng.sample::<f64, _>(StandardNormal)).collect();
        for c in 0..l {
            let excess = liability[c] - thresholds[c];
            if excess > 0.0 {
                raw[[i, c]] = match schema.get(c).kind {
                    LabelKind::Binary => 1,
                    LabelKind::Graded { max_grade } => grade(excess, max_grade),
                };
            }
        }
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            values[[i, j]] = match owner[j] {
                Some(c) => liability[c] + spec.feature_noise * noise,
                None => noise,
            };
        }
    }

    let width = n.to_string().len().max(5);
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:0width$}")).collect();
    let names: Vec<String> = (0..d).map(|j| format!("f{j:02}")).collect();
    let ids_labels = schema.ids();
    Ok(SyntheticBenchmark {
        manifest: Manifest::new(schema, ids.clone(), raw)?,
        features: FeatureMatrix::new(ids, names, values)?,
        informative: owner.iter().map(|o| o.map(|c| ids_labels[c].clone())).collect(),
    })
}

/// Paths written by [`write_benchmark`].
#[derive(Debug, Clone)]
pub struct BenchmarkFiles {
    pub manifest: PathBuf,
    pub features: PathBuf,
}

/// Writes `manifest.csv` and `features.csv` under `dir`.
pub fn write_benchmark(bench: &SyntheticBenchmark, dir: impl AsRef<Path>) -> Result<BenchmarkFiles, SimulateError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let files = BenchmarkFiles { manifest: dir.join("manifest.csv"), features: dir.join("features.csv") };
    bench.manifest.save(&files.manifest)?;
    bench.features.save(&files.features)?;
    Ok(files)
}
