//! Seeded random search with a median pruner.
//!
//! Trials run sequentially. After every epoch a trial reports its validation
//! macro-AUC; once `n_startup` trials have completed, a trial whose value at
//! some epoch is strictly below the median of the completed trials' values at
//! that epoch is stopped. The last epoch is never pruned, so a pruned trial
//! always has fewer intermediate values than `max_epochs`.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::manifest::BinaryLabelMatrix;
use crate::seeds::derive_seed;
use crate::stratify::{stratified_subset, SplitView, StratifyError};
use crate::trainer::{train_fold_with, BaseLearnerSpec, TrainError, TrainOptions};

#[derive(Debug, Error)]
pub enum HyperoptError {
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("every trial was pruned")]
    AllTrialsPruned,
    #[error("trial {0} reported no intermediate value")]
    NoReports(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Stratify(#[from] StratifyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Log-uniform.
    pub lr_range: (f64, f64),
    /// Log-uniform.
    pub wd_range: (f64, f64),
    pub dropout_range: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self { lr_range: (1e-6, 3e-4), wd_range: (1e-6, 1e-2), dropout_range: (0.0, 0.6) }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), HyperoptError> {
        for (name, (lo, hi), log) in
            [("lr", self.lr_range, true), ("wd", self.wd_range, true), ("dropout", self.dropout_range, false)]
        {
            let ok = lo.is_finite() && hi.is_finite() && lo <= hi && (!log || lo > 0.0);
            if !ok {
                return Err(HyperoptError::InvalidConfig(format!("bad {name} range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &TrialParams) -> bool {
        let within = |(lo, hi): (f64, f64), v: f64| lo <= v && v <= hi;
        within(self.lr_range, p.learning_rate)
            && within(self.wd_range, p.weight_decay)
            && within(self.dropout_range, p.dropout_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
}

impl TrialParams {
    /// `template` with these three hyperparameters substituted.
    pub fn apply(&self, template: &BaseLearnerSpec) -> BaseLearnerSpec {
        BaseLearnerSpec {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            dropout_rate: self.dropout_rate,
            ..template.clone()
        }
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo.ln()..=hi.ln()).exp().clamp(lo, hi)
}

/// One draw: learning rate and weight decay log-uniform, dropout uniform.
pub fn sample_params<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> TrialParams {
    let learning_rate = log_uniform(rng, space.lr_range);
    let weight_decay = log_uniform(rng, space.wd_range);
    let (lo, hi) = space.dropout_range;
    let dropout_rate = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    TrialParams { learning_rate, weight_decay, dropout_rate }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub params: TrialParams,
    /// Objective value after each epoch, in order.
    pub intermediate: Vec<f64>,
    pub status: TrialStatus,
    /// Last intermediate value; absent for pruned trials.
    pub final_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedianPruner {
    /// Completed trials required before pruning can fire.
    pub n_startup: usize,
    /// Also count pruned trials' partial values in the median.
    pub include_pruned: bool,
}

impl Default for MedianPruner {
    fn default() -> Self {
        Self { n_startup: 5, include_pruned: false }
    }
}

/// Median of a non-empty slice; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

impl MedianPruner {
    /// Median of earlier trials' values at `epoch` (0-based).
    pub fn median_at(&self, history: &[TrialRecord], epoch: usize) -> Option<f64> {
        let values: Vec<f64> = history
            .iter()
            .filter(|t| t.status == TrialStatus::Completed || self.include_pruned)
            .filter_map(|t| t.intermediate.get(epoch).copied())
            .collect();
        median(&values)
    }

    pub fn should_prune(&self, history: &[TrialRecord], epoch: usize, value: f64) -> bool {
        let completed = history.iter().filter(|t| t.status == TrialStatus::Completed).count();
        if completed < self.n_startup {
            return false;
        }
        self.median_at(history, epoch).is_some_and(|m| value < m)
    }
}

/// Handle passed to the objective for one trial.
#[derive(Debug)]
pub struct Trial<'a> {
    pub id: usize,
    pub params: TrialParams,
    /// Seed for any randomness inside the objective.
    pub seed: u64,
    max_epochs: usize,
    pruner: &'a MedianPruner,
    history: &'a [TrialRecord],
    intermediate: Vec<f64>,
    pruned: bool,
}

impl Trial<'_> {
    /// Records the value for the next epoch. `Break` means stop: either the
    /// trial was pruned or `max_epochs` values have been reported. Reports
    /// after that are ignored.
    pub fn report(&mut self, value: f64) -> ControlFlow<()> {
        if self.pruned || self.intermediate.len() >= self.max_epochs {
            return ControlFlow::Break(());
        }
        let epoch = self.intermediate.len();
        self.intermediate.push(value);
        if epoch + 1 >= self.max_epochs {
            return ControlFlow::Break(());
        }
        if self.pruner.should_prune(self.history, epoch, value) {
            self.pruned = true;
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    }

    pub fn is_pruned(&self) -> bool {
        self.pruned
    }

    pub fn intermediate(&self) -> &[f64] {
        &self.intermediate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub n_trials: usize,
    pub max_epochs: usize,
    /// Fraction of the tuning pool used for the search.
    pub subset_fraction: f64,
    /// Share of the subset held out for trial validation.
    pub inner_valid_fraction: f64,
    pub pruner: MedianPruner,
    pub space: SearchSpace,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_trials: 30,
            max_epochs: 3,
            subset_fraction: 0.10,
            inner_valid_fraction: 0.2,
            pruner: MedianPruner::default(),
            space: SearchSpace::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), HyperoptError> {
        let bad = |m: &str| Err(HyperoptError::InvalidConfig(m.into()));
        if self.n_trials == 0 {
            return bad("n_trials must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad("subset_fraction must be in (0, 1]");
        }
        if !(self.inner_valid_fraction > 0.0 && self.inner_valid_fraction < 1.0) {
            return bad("inner_valid_fraction must be in (0, 1)");
        }
        self.space.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: TrialRecord,
    pub trials: Vec<TrialRecord>,
}

impl SearchOutcome {
    /// One JSON object per line, in trial order.
    pub fn write_trial_log<W: Write>(&self, mut writer: W) -> Result<(), HyperoptError> {
        for t in &self.trials {
            serde_json::to_writer(&mut writer, t)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_trial_log(&self, path: impl AsRef<Path>) -> Result<(), HyperoptError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_trial_log(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_trial_log(text: &str) -> Result<Vec<TrialRecord>, HyperoptError> {
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }
}

/// Runs `config.n_trials` trials. Parameters come from one RNG stream seeded
/// by `seed`; each trial also gets its own derived seed. The best trial is the
/// completed one with the highest final value, earliest on ties.
pub fn run_search<F>(config: &SearchConfig, seed: u64, mut objective: F) -> Result<SearchOutcome, HyperoptError>
where
    F: FnMut(&mut Trial<'_>) -> Result<(), HyperoptError>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials: Vec<TrialRecord> = Vec::with_capacity(config.n_trials);
    for id in 0..config.n_trials {
        let params = sample_params(&config.space, &mut rng);
        let mut trial = Trial {
            id,
            params,
            seed: derive_seed(seed, &format!("trial-{id}")),
            max_epochs: config.max_epochs,
            pruner: &config.pruner,
            history: &trials,
            intermediate: Vec::new(),
            pruned: false,
        };
        objective(&mut trial)?;
        let Trial { intermediate, pruned, .. } = trial;
        if intermediate.is_empty() {
            return Err(HyperoptError::NoReports(id));
        }
        let (status, final_value) =
            if pruned { (TrialStatus::Pruned, None) } else { (TrialStatus::Completed, intermediate.last().copied()) };
        log::debug!("trial {id}: {status:?} after {} epochs, {params:?}", intermediate.len());
        trials.push(TrialRecord { trial_id: id, params, intermediate, status, final_value });
    }
    let best = trials
        .iter()
        .filter_map(|t| t.final_value.map(|v| (v, t)))
        .fold(None::<(f64, &TrialRecord)>, |acc, (v, t)| match acc {
            Some((b, _)) if v <= b => acc,
            _ => Some((v, t)),
        })
        .map(|(_, t)| t.clone())
        .ok_or(HyperoptError::AllTrialsPruned)?;
    Ok(SearchOutcome { best, trials })
}

/// Rows used by [`tune_base_learner`]: a stratified `subset_fraction` share of
/// `pool`, split again into inner train and validation parts. Indices refer to
/// the full `truth` matrix.
pub fn tuning_view(
    truth: &BinaryLabelMatrix,
    pool: &[usize],
    config: &SearchConfig,
    seed: u64,
) -> Result<SplitView, HyperoptError> {
    let subset: Vec<usize> = stratified_subset(&truth.select_rows(pool), config.subset_fraction, derive_seed(seed, "subset"))?
        .valid
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let inner = stratified_subset(&truth.select_rows(&subset), config.inner_valid_fraction, derive_seed(seed, "inner"))?;
    Ok(SplitView {
        train: inner.train.iter().map(|&i| subset[i]).collect(),
        valid: inner.valid.iter().map(|&i| subset[i]).collect(),
    })
}

/// Searches learning rate, weight decay and dropout for `template` by training
/// on the tuning view of `pool` for up to `config.max_epochs` epochs per trial.
pub fn tune_base_learner(
    template: &BaseLearnerSpec,
    features: &FeatureMatrix,
    truth: &BinaryLabelMatrix,
    pool: &[usize],
    batch_size: usize,
    config: &SearchConfig,
    seed: u64,
) -> Result<SearchOutcome, HyperoptError> {
    config.validate()?;
    let view = tuning_view(truth, pool, config, seed)?;
    if view.train.is_empty() || view.valid.is_empty() {
        return Err(HyperoptError::InvalidConfig(format!("tuning subset of {} rows is too small", pool.len())));
    }
    run_search(config, derive_seed(seed, "search"), |trial| {
        let spec = trial.params.apply(template);
        let options = TrainOptions { epochs: config.max_epochs, batch_size, seed: trial.seed };
        train_fold_with(&spec, features, truth, &view, &options, |epoch| trial.report(epoch.valid_macro_auc))?;
        Ok(())
    })
}

const REFERENCE_PRESETS: &str = include_str!("../presets/reference_hyperparameters.json");

/// Published optimum per image architecture; usable as fixed base-learner
/// settings when tuning is skipped.
pub fn reference_presets() -> IndexMap<String, TrialParams> {
    serde_json::from_str(REFERENCE_PRESETS).expect("bundled preset parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scripted(values: Vec<Vec<f64>>, n_startup: usize, max_epochs: usize) -> SearchOutcome {
        let config = SearchConfig {
            n_trials: values.len(),
            max_epochs,
            pruner: MedianPruner { n_startup, include_pruned: false },
            ..SearchConfig::default()
        };
        run_search(&config, 1, |t| {
            for &v in &values[t.id] {
                if t.report(v).is_break() {
                    break;
                }
            }
            Ok(())
        })
        .unwrap()
    }

    #[test]
    fn single_trial_completes() {
        let out = scripted(vec![vec![0.1, 0.2, 0.3]], 0, 3);
        assert_eq!(out.trials[0].status, TrialStatus::Completed);
        assert_eq!(out.best.final_value, Some(0.3));
    }

    #[test]
    fn sixth_trial_below_median_is_pruned_at_first_epoch() {
        let mut v: Vec<Vec<f64>> = (0..5).map(|i| vec![0.5 + 0.01 * i as f64, 0.6, 0.7]).collect();
        v.push(vec![0.51, 0.9, 0.9]);
        let out = scripted(v, 5, 3);
        assert!(out.trials[..5].iter().all(|t| t.status == TrialStatus::Completed));
        assert_eq!(out.trials[5].status, TrialStatus::Pruned);
        assert_eq!(out.trials[5].intermediate, vec![0.51]);
        assert_eq!(out.trials[5].final_value, None);
    }

    #[test]
    fn value_equal_to_median_survives() {
        let mut v: Vec<Vec<f64>> = (0..5).map(|i| vec![0.5 + 0.01 * i as f64, 0.6]).collect();
        v.push(vec![0.52, 0.1]);
        let out = scripted(v, 5, 2);
        assert_eq!(out.trials[5].status, TrialStatus::Completed);
        assert_eq!(out.trials[5].intermediate.len(), 2);
    }

    #[test]
    fn startup_trials_never_pruned() {
        let v: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0 - 0.1 * i as f64; 3]).collect();
        let out = scripted(v, 5, 3);
        assert!(out.trials.iter().all(|t| t.status == TrialStatus::Completed));
    }

    #[test]
    fn even_median_is_midpoint() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn include_pruned_changes_median_pool() {
        let rec = |id, v: Vec<f64>, status| TrialRecord {
            trial_id: id,
            params: TrialParams { learning_rate: 1e-4, weight_decay: 1e-4, dropout_rate: 0.0 },
            final_value: (status == TrialStatus::Completed).then(|| *v.last().unwrap()),
            intermediate: v,
            status,
        };
        let history = vec![rec(0, vec![0.8, 0.8], TrialStatus::Completed), rec(1, vec![0.2], TrialStatus::Pruned)];
        let strict = MedianPruner { n_startup: 1, include_pruned: false };
        let loose = MedianPruner { include_pruned: true, ..strict };
        assert_eq!(strict.median_at(&history, 0), Some(0.8));
        assert_eq!(loose.median_at(&history, 0), Some(0.5));
        assert!(strict.should_prune(&history, 0, 0.6));
        assert!(!loose.should_prune(&history, 0, 0.6));
    }

    #[test]
    fn degenerate_space_returns_bounds() {
        let space = SearchSpace { lr_range: (1e-5, 1e-5), wd_range: (0.01, 0.01), dropout_range: (0.3, 0.3) };
        let p = sample_params(&space, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p, TrialParams { learning_rate: 1e-5, weight_decay: 0.01, dropout_rate: 0.3 });
    }

    #[test]
    fn log_lr_median_near_midpoint() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logs: Vec<f64> = (0..10_000).map(|_| sample_params(&space, &mut rng).learning_rate.ln()).collect();
        let (lo, hi) = (space.lr_range.0.ln(), space.lr_range.1.ln());
        let mid = (lo + hi) / 2.0;
        assert!((median(&logs).unwrap() - mid).abs() < 0.05 * mid.abs());
    }

    #[test]
    fn presets_lie_in_default_space() {
        let presets = reference_presets();
        assert_eq!(presets.len(), 6);
        assert!(presets.values().all(|p| SearchSpace::default().contains(p)));
    }

    #[test]
    fn trial_log_round_trips() {
        let out = scripted(vec![vec![0.3, 0.4], vec![0.2, 0.1]], 0, 2);
        let mut buf = Vec::new();
        out.write_trial_log(&mut buf).unwrap();
        assert_eq!(SearchOutcome::read_trial_log(std::str::from_utf8(&buf).unwrap()).unwrap(), out.trials);
    }

    proptest! {
        #[test]
        fn samples_stay_in_bounds(seed in any::<u64>()) {
            let space = SearchSpace::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                prop_assert!(space.contains(&sample_params(&space, &mut rng)));
            }
        }

        #[test]
        fn pruned_trials_are_short_and_best_is_max(
            script in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..15),
            n_startup in 0usize..6,
        ) {
            let out = scripted(script, n_startup, 4);
            for t in &out.trials {
                match t.status {
                    TrialStatus::Pruned => prop_assert!(t.intermediate.len() < 4),
                    TrialStatus::Completed => prop_assert_eq!(t.final_value, t.intermediate.last().copied()),
                }
            }
            let max = out.trials.iter().filter_map(|t| t.final_value).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(out.best.final_value, Some(max));
            prop_assert!(out.trials[..n_startup.min(out.trials.len())].iter().all(|t| t.status == TrialStatus::Completed));
        }
    }
}
