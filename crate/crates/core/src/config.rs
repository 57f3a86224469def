//! Pipeline configuration. Every field has a default, so a JSON config file
//! only needs to name what it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hyperopt::{reference_presets, SearchConfig, TrialParams};
use crate::seeds::derive_seed;
use crate::stacking::GbdtParams;
use crate::trainer::BaseLearnerSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("config file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture of one base learner; hyperparameters come from tuning or
/// from `fallback`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTemplate {
    pub model_id: String,
    pub hidden_units: usize,
    #[serde(default = "default_feature_fraction")]
    pub feature_fraction: f64,
    /// Fixed feature-subset seed; derived from the root seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_subset_seed: Option<u64>,
    /// Used when tuning is disabled.
    pub fallback: TrialParams,
}

fn default_feature_fraction() -> f64 {
    0.8
}

/// Hidden widths cycled over when templates are generated.
const DEFAULT_WIDTHS: [usize; 6] = [0, 16, 32, 8, 24, 12];

/// `n` templates named `m0..`, widths cycling through [`DEFAULT_WIDTHS`]
/// and fallback hyperparameters cycling through the bundled reference presets.
pub fn default_templates(n: usize) -> Vec<ModelTemplate> {
    let presets: Vec<TrialParams> = reference_presets().into_values().collect();
    (0..n)
        .map(|i| ModelTemplate {
            model_id: format!("m{i}"),
            hidden_units: DEFAULT_WIDTHS[i % DEFAULT_WIDTHS.len()],
            feature_fraction: default_feature_fraction(),
            feature_subset_seed: None,
            fallback: presets[i % presets.len()],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k_folds: usize,
    /// Expected label count; checked against the manifest.
    pub n_labels: usize,
    pub n_models: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub oof_holdout_fraction: f64,
    /// Decision threshold for F1, precision and recall.
    pub threshold: f64,
    /// Worker threads for training; 0 uses every core.
    pub jobs: usize,
    /// Run the hyperparameter search; otherwise templates' fallbacks are used.
    pub tune: bool,
    pub search: SearchConfig,
    pub gbdt: GbdtParams,
    /// Initial meta margin (logit).
    pub base_score: f64,
    /// Entries in each exported importance list.
    pub importance_top_k: usize,
    /// Explicit templates; empty means `default_templates(n_models)`.
    pub models: Vec<ModelTemplate>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_folds: 5,
            n_labels: 11,
            n_models: 6,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            oof_holdout_fraction: 0.25,
            threshold: 0.5,
            jobs: 0,
            tune: true,
            search: SearchConfig::default(),
            gbdt: GbdtParams::default(),
            base_score: 0.0,
            importance_top_k: 10,
            models: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.k_folds < 2 {
            return bad(format!("k_folds must be at least 2, got {}", self.k_folds));
        }
        if !(self.oof_holdout_fraction > 0.0 && self.oof_holdout_fraction < 1.0) {
            return bad(format!("oof_holdout_fraction must be in (0, 1), got {}", self.oof_holdout_fraction));
        }
        if self.n_models == 0 {
            return bad("n_models must be at least 1".into());
        }
        if !self.models.is_empty() && self.models.len() != self.n_models {
            return bad(format!("{} model templates for n_models = {}", self.models.len(), self.n_models));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if self.n_labels == 0 {
            return bad("n_labels must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must be in [0, 1], got {}", self.threshold));
        }
        let templates = self.templates_ref();
        let mut ids: Vec<&str> = templates.iter().map(|t| t.model_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("model ids must be unique".into());
        }
        if ids.iter().any(|id| id.is_empty() || id.contains([':', '/', '\\'])) {
            return bad("model ids must be non-empty and free of ':' and path separators".into());
        }
        self.gbdt.validate().map_err(ConfigError::Invalid)?;
        self.search.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    fn templates_ref(&self) -> std::borrow::Cow<'_, [ModelTemplate]> {
        if self.models.is_empty() {
            std::borrow::Cow::Owned(default_templates(self.n_models))
        } else {
            std::borrow::Cow::Borrowed(&self.models)
        }
    }

    pub fn templates(&self) -> Vec<ModelTemplate> {
        self.templates_ref().into_owned()
    }

    /// Named sub-seed of the root seed.
    pub fn seed_for(&self, name: &str) -> u64 {
        derive_seed(self.seed, name)
    }

    /// Base-learner spec for `template` with the given hyperparameters.
    pub fn spec_for(&self, template: &ModelTemplate, params: &TrialParams) -> BaseLearnerSpec {
        BaseLearnerSpec {
            model_id: template.model_id.clone(),
            hidden_units: template.hidden_units,
            dropout_rate: params.dropout_rate,
            learning_rate: params.learning_rate,
            weight_decay: params.weight_decay,
            feature_subset_seed: template
                .feature_subset_seed
                .unwrap_or_else(|| self.seed_for(&format!("features/{}", template.model_id))),
            feature_fraction: template.feature_fraction,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!((c.k_folds, c.n_labels, c.n_models, c.epochs, c.batch_size), (5, 11, 6, 10, 32));
        assert_eq!(c.oof_holdout_fraction, 0.25);
        assert_eq!(c.templates().len(), 6);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = PipelineConfig::from_json(r#"{"k_folds": 3, "seed": 9}"#).unwrap();
        assert_eq!(c.k_folds, 3);
        assert_eq!(c.epochs, 10);
        assert!(PipelineConfig::from_json(r#"{"k_fold": 3}"#).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        for json in [
            r#"{"k_folds": 1}"#,
            r#"{"oof_holdout_fraction": 1.0}"#,
            r#"{"oof_holdout_fraction": 0.0}"#,
            r#"{"n_models": 0}"#,
            r#"{"epochs": 0}"#,
        ] {
            assert!(matches!(PipelineConfig::from_json(json), Err(ConfigError::Invalid(_))), "{json}");
        }
    }

    #[test]
    fn json_round_trip() {
        let c = PipelineConfig { seed: 42, tune: false, ..PipelineConfig::default() };
        assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn feature_subsets_differ_between_models() {
        let c = PipelineConfig::default();
        let t = c.templates();
        let a = c.spec_for(&t[0], &t[0].fallback);
        let b = c.spec_for(&t[1], &t[1].fallback);
        assert_ne!(a.feature_subset(40), b.feature_subset(40));
    }
}
