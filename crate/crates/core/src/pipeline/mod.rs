//! End-to-end orchestration: split → tune → train → OOF → stack → eval → report.
//!
//! Every stage reads its inputs from the run directory and records what it
//! wrote in the ledger, so each stage can also be run on its own. All
//! randomness comes from named sub-seeds of the configured root seed.

pub mod external;
pub mod ledger;
pub mod report;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::features::FeatureMatrix;
use crate::hyperopt::{tune_base_learner, HyperoptError, TrialParams, TrialStatus};
use crate::manifest::{binarize_manifest, load_manifest, read_label_columns, BinaryLabelMatrix, Manifest, ManifestError};
use crate::metrics::{macro_report, roc_curves, MetricsError, MetricsReport};
use crate::predictions::{PredictionError, PredictionMatrix};
use crate::schema::{LabelSchema, SchemaError};
use crate::stacking::{assemble_oof, fit_meta, holdout_split, predict_meta, GbdtMetaLearner, OofMatrix, StackingError};
use crate::stratify::{stratified_kfold, FoldAssignment, StratifyError};
use crate::taxonomy::TaxonomyError;
use crate::trainer::{predict, train_fold, BaseLearnerModel, TrainError, TrainOptions};

pub use external::{evaluate_external, write_external, ExternalEvaluation, ExternalTarget};
pub use ledger::{InputRecord, RunLayout, RunLedger, Stage, StageRecord, StageStatus};
pub use report::{build_report, RunReport, REPORT_SCHEMA};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("run is incomplete: {0}")]
    IncompleteRun(String),
    #[error("input `{0}` changed since the run was created")]
    InputChanged(String),
    #[error("external evaluation set is empty")]
    EmptyExternalSet,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Features(#[from] PredictionError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Stratify(#[from] StratifyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Hyperopt(#[from] HyperoptError),
    #[error(transparent)]
    Stacking(#[from] StackingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Errors caused by bad inputs rather than by a stage failing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Validation(_)
                | PipelineError::InputChanged(_)
                | PipelineError::EmptyExternalSet
                | PipelineError::Config(_)
                | PipelineError::Schema(_)
                | PipelineError::Manifest(_)
                | PipelineError::Features(_)
                | PipelineError::Taxonomy(_)
        )
    }
}

/// Ground truth and features, row-aligned.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub manifest: Manifest,
    pub truth: BinaryLabelMatrix,
    pub features: FeatureMatrix,
}

impl RunInputs {
    pub fn schema(&self) -> &LabelSchema {
        self.manifest.schema()
    }
}

/// Reads a manifest whose schema is inferred from its header.
pub fn load_manifest_inferred(path: impl AsRef<Path>) -> Result<Manifest, PipelineError> {
    let path = path.as_ref();
    let schema = LabelSchema::infer_from_columns(&read_label_columns(path)?)?;
    Ok(load_manifest(path, &schema)?)
}

/// Loads the manifest and the features, aligning feature rows to the manifest.
pub fn load_inputs(manifest: impl AsRef<Path>, features: impl AsRef<Path>) -> Result<RunInputs, PipelineError> {
    let manifest = load_manifest_inferred(manifest)?;
    if manifest.is_empty() {
        return Err(PipelineError::Validation("manifest has no samples".into()));
    }
    let features = FeatureMatrix::load(features)?.align_to(manifest.sample_ids())?;
    let truth = binarize_manifest(&manifest);
    Ok(RunInputs { manifest, truth, features })
}

/// Shape summary printed by `validate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub n_samples: usize,
    pub n_features: usize,
    pub labels: Vec<String>,
    pub positives: Vec<usize>,
}

/// Checks the config against the inputs without writing anything.
pub fn validate_inputs(config: &PipelineConfig, inputs: &RunInputs) -> Result<InputSummary, PipelineError> {
    config.validate()?;
    let truth = &inputs.truth;
    if truth.n_labels() != config.n_labels {
        return Err(PipelineError::Validation(format!(
            "config expects {} labels, manifest has {}",
            config.n_labels,
            truth.n_labels()
        )));
    }
    if truth.n_samples() < config.k_folds {
        return Err(PipelineError::Validation(format!(
            "{} samples cannot fill {} folds",
            truth.n_samples(),
            config.k_folds
        )));
    }
    Ok(InputSummary {
        n_samples: truth.n_samples(),
        n_features: inputs.features.n_features(),
        labels: truth.labels().to_vec(),
        positives: truth.positives(),
    })
}

/// Hyperparameters each base learner is trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedParams {
    pub params: TrialParams,
    /// `search` or `preset`.
    pub source: String,
    pub best_trial: Option<usize>,
    pub best_value: Option<f64>,
    pub n_trials: usize,
    pub n_pruned: usize,
}

/// Per-fold training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub model_id: String,
    pub fold: usize,
    pub best_epoch: usize,
    pub best_valid_macro_auc: f64,
}

/// Everything the eval stage measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Each base model on the full OOF matrix.
    pub singles_oof: Vec<MetricsReport>,
    /// Each base model restricted to the hold-out rows.
    pub singles_holdout: Vec<MetricsReport>,
    /// The meta-learner on the hold-out rows.
    pub meta_holdout: MetricsReport,
    pub n_fit: usize,
    pub n_eval: usize,
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::Validation(format!("thread pool: {e}")))
}

fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(parent) => std::fs::create_dir_all(parent),
        None => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Writes one ROC CSV per non-degenerate label of `truth` under `block`.
pub fn write_roc_files(
    dir: &Path,
    block: &str,
    pred: &PredictionMatrix,
    truth: &BinaryLabelMatrix,
) -> Result<Vec<PathBuf>, PipelineError> {
    let mut written = Vec::new();
    for (label, curve) in roc_curves(pred, truth)? {
        let path = dir.join(RunLayout::roc(block, &label));
        ensure_parent(&path)?;
        curve.write_csv(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        written.push(path);
    }
    Ok(written)
}

fn write_holdout(path: &Path, fit: &[String], eval: &[String]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "part"])?;
    for id in fit {
        w.write_record([id.as_str(), "fit"])?;
    }
    for id in eval {
        w.write_record([id.as_str(), "eval"])?;
    }
    w.flush()?;
    Ok(())
}

/// `(fit ids, eval ids)` from `holdout.csv`.
fn read_holdout(path: &Path) -> Result<(Vec<String>, Vec<String>), PipelineError> {
    let mut reader = csv::Reader::from_path(path)?;
    let (mut fit, mut eval) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record?;
        match record.get(1) {
            Some("fit") => fit.push(record[0].to_string()),
            Some("eval") => eval.push(record[0].to_string()),
            other => return Err(PipelineError::Validation(format!("bad hold-out part {other:?}"))),
        }
    }
    Ok((fit, eval))
}

/// A run directory plus the inputs it was created from.
#[derive(Debug)]
pub struct Run {
    layout: RunLayout,
    ledger: RunLedger,
    inputs: RunInputs,
}

impl Run {
    /// Starts a fresh run in `dir`, replacing any ledger already there.
    pub fn create(
        dir: impl Into<PathBuf>,
        config: PipelineConfig,
        manifest_path: impl AsRef<Path>,
        features_path: impl AsRef<Path>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let inputs = load_inputs(&manifest_path, &features_path)?;
        validate_inputs(&config, &inputs)?;
        let mut records = IndexMap::new();
        for (name, path) in [("manifest", manifest_path.as_ref()), ("features", features_path.as_ref())] {
            let absolute = std::fs::canonicalize(path)?;
            records.insert(
                name.to_string(),
                InputRecord { path: absolute.display().to_string(), sha256: ledger::sha256_file(&absolute)? },
            );
        }
        let layout = RunLayout::new(dir);
        let ledger = RunLedger::new(config, inputs.schema().clone(), records);
        ledger.save(&layout)?;
        Ok(Self { layout, ledger, inputs })
    }

    /// Reopens a run, reloading its inputs and checking they are unchanged.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let layout = RunLayout::new(dir);
        if !layout.path(RunLayout::LEDGER).is_file() {
            return Err(PipelineError::IncompleteRun(format!("no ledger in {}", layout.root().display())));
        }
        let ledger = RunLedger::load(&layout)?;
        for (name, record) in &ledger.inputs {
            if ledger::sha256_file(&record.path)? != record.sha256 {
                return Err(PipelineError::InputChanged(name.clone()));
            }
        }
        let inputs = load_inputs(&ledger.inputs["manifest"].path, &ledger.inputs["features"].path)?;
        Ok(Self { layout, ledger, inputs })
    }

    pub fn layout(&self) -> &RunLayout {
        &self.layout
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.ledger.config
    }

    pub fn inputs(&self) -> &RunInputs {
        &self.inputs
    }

    /// Worker count for later stages; does not affect any result.
    pub fn set_jobs(&mut self, jobs: usize) {
        self.ledger.config.jobs = jobs;
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.config().templates().into_iter().map(|t| t.model_id).collect()
    }

    fn path(&self, relative: &str) -> PathBuf {
        self.layout.path(relative)
    }

    fn seed(&mut self, name: &str) -> u64 {
        let seed = self.config().seed_for(name);
        self.ledger.record_seed(name, seed);
        seed
    }

    fn artifact(&mut self, name: impl Into<String>, relative: impl Into<String>) {
        self.ledger.record_artifact(name, relative);
    }

    /// Fails unless `stage` completed and every recorded artifact is on disk.
    fn require(&self, stage: Stage) -> Result<(), PipelineError> {
        if !self.ledger.is_completed(stage) {
            return Err(PipelineError::IncompleteRun(format!("stage `{}` has not completed", stage.name())));
        }
        let missing = self.ledger.missing_artifacts(&self.layout);
        if let Some(first) = missing.first() {
            return Err(PipelineError::IncompleteRun(format!("artifact `{first}` is missing")));
        }
        Ok(())
    }

    fn run_stage<T>(&mut self, stage: Stage, body: impl FnOnce(&mut Self) -> Result<T, PipelineError>) -> Result<T, PipelineError> {
        self.ledger.stages.push(StageRecord {
            stage,
            status: StageStatus::Running,
            started_ms: ledger::now_ms(),
            finished_ms: None,
            error: None,
        });
        self.ledger.save(&self.layout)?;
        log::info!("stage {} started", stage.name());
        let result = body(self);
        let record = self.ledger.stages.last_mut().expect("pushed above");
        record.finished_ms = Some(ledger::now_ms());
        match &result {
            Ok(_) => record.status = StageStatus::Completed,
            Err(e) => {
                record.status = StageStatus::Failed;
                record.error = Some(e.to_string());
                log::error!("stage {} failed: {e}", stage.name());
            }
        }
        self.ledger.save(&self.layout)?;
        result
    }

    pub fn load_folds(&self) -> Result<FoldAssignment, PipelineError> {
        let folds = FoldAssignment::load(self.path(RunLayout::FOLDS))?;
        if folds.sample_ids() != self.inputs.truth.sample_ids() {
            return Err(PipelineError::Validation("fold file does not match the manifest samples".into()));
        }
        Ok(folds)
    }

    pub fn load_params(&self) -> Result<IndexMap<String, TunedParams>, PipelineError> {
        read_json(&self.path(RunLayout::PARAMS))
    }

    pub fn load_model(&self, model_id: &str, fold: usize) -> Result<BaseLearnerModel, PipelineError> {
        Ok(BaseLearnerModel::load(self.path(&RunLayout::model(model_id, fold)))?)
    }

    pub fn load_oof(&self) -> Result<OofMatrix, PipelineError> {
        Ok(OofMatrix::load(self.path(RunLayout::OOF))?)
    }

    pub fn load_meta(&self) -> Result<GbdtMetaLearner, PipelineError> {
        Ok(GbdtMetaLearner::load(self.path(RunLayout::META_MODEL))?)
    }

    pub fn load_evaluation(&self) -> Result<Evaluation, PipelineError> {
        read_json(&self.path(RunLayout::EVALUATION))
    }

    /// Stratified K-fold assignment.
    pub fn split(&mut self) -> Result<FoldAssignment, PipelineError> {
        self.run_stage(Stage::Split, |run| {
            let seed = run.seed("split");
            let folds = stratified_kfold(&run.inputs.truth, run.config().k_folds, seed)?;
            folds.save(run.path(RunLayout::FOLDS))?;
            run.artifact("folds", RunLayout::FOLDS);
            Ok(folds)
        })
    }

    /// Hyperparameter search per model on fold 0's training rows, or the
    /// template fallbacks when tuning is disabled.
    pub fn tune(&mut self) -> Result<IndexMap<String, TunedParams>, PipelineError> {
        self.require(Stage::Split)?;
        self.run_stage(Stage::Tune, |run| {
            let config = run.config().clone();
            let templates = config.templates();
            let seeds: Vec<u64> = templates.iter().map(|t| run.seed(&format!("tune/{}", t.model_id))).collect();
            let mut params = IndexMap::new();
            if !config.tune {
                for t in &templates {
                    params.insert(
                        t.model_id.clone(),
                        TunedParams {
                            params: t.fallback,
                            source: "preset".into(),
                            best_trial: None,
                            best_value: None,
                            n_trials: 0,
                            n_pruned: 0,
                        },
                    );
                }
            } else {
                let pool_rows = run.load_folds()?.split_views(0)?.train;
                let (features, truth) = (&run.inputs.features, &run.inputs.truth);
                let outcomes = thread_pool(config.jobs)?.install(|| {
                    templates
                        .par_iter()
                        .zip(&seeds)
                        .map(|(t, &seed)| {
                            let spec = config.spec_for(t, &t.fallback);
                            tune_base_learner(&spec, features, truth, &pool_rows, config.batch_size, &config.search, seed)
                        })
                        .collect::<Vec<_>>()
                });
                for (t, outcome) in templates.iter().zip(outcomes) {
                    let outcome = outcome?;
                    let log = RunLayout::trial_log(&t.model_id);
                    ensure_parent(&run.path(&log))?;
                    outcome.save_trial_log(run.path(&log))?;
                    run.artifact(format!("trials/{}", t.model_id), log);
                    params.insert(
                        t.model_id.clone(),
                        TunedParams {
                            params: outcome.best.params,
                            source: "search".into(),
                            best_trial: Some(outcome.best.trial_id),
                            best_value: outcome.best.final_value,
                            n_trials: outcome.trials.len(),
                            n_pruned: outcome.trials.iter().filter(|r| r.status == TrialStatus::Pruned).count(),
                        },
                    );
                }
            }
            write_json(&run.path(RunLayout::PARAMS), &params)?;
            run.artifact("params", RunLayout::PARAMS);
            Ok(params)
        })
    }

    /// Trains every (model, fold) pair concurrently and stores each fold
    /// model's predictions on its own validation fold.
    pub fn train(&mut self) -> Result<Vec<FoldSummary>, PipelineError> {
        self.require(Stage::Tune)?;
        self.run_stage(Stage::Train, |run| {
            let config = run.config().clone();
            let folds = run.load_folds()?;
            let params = run.load_params()?;
            let mut jobs = Vec::new();
            for t in config.templates() {
                let tuned = params
                    .get(&t.model_id)
                    .ok_or_else(|| PipelineError::IncompleteRun(format!("no parameters for `{}`", t.model_id)))?;
                let spec = config.spec_for(&t, &tuned.params);
                for fold in 0..folds.k() {
                    let seed = run.seed(&format!("train/{}/fold{fold}", t.model_id));
                    jobs.push((spec.clone(), fold, seed));
                }
            }
            let (features, truth, layout) = (&run.inputs.features, &run.inputs.truth, &run.layout);
            let results = thread_pool(config.jobs)?.install(|| {
                jobs.par_iter()
                    .map(|(spec, fold, seed)| -> Result<FoldSummary, PipelineError> {
                        let view = folds.split_views(*fold)?;
                        let options = TrainOptions { epochs: config.epochs, batch_size: config.batch_size, seed: *seed };
                        let model = train_fold(spec, features, truth, &view, &options)?;
                        let preds = predict(&model, &features.select_rows(&view.valid))?;
                        let model_path = layout.path(&RunLayout::model(&spec.model_id, *fold));
                        let pred_path = layout.path(&RunLayout::fold_predictions(&spec.model_id, *fold));
                        ensure_parent(&model_path)?;
                        ensure_parent(&pred_path)?;
                        model.save(&model_path)?;
                        preds.save(&pred_path)?;
                        Ok(FoldSummary {
                            model_id: spec.model_id.clone(),
                            fold: *fold,
                            best_epoch: model.best_epoch,
                            best_valid_macro_auc: model.best_macro_auc,
                        })
                    })
                    .collect::<Vec<_>>()
            });
            let summaries = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            for s in &summaries {
                run.artifact(format!("model/{}/{}", s.model_id, s.fold), RunLayout::model(&s.model_id, s.fold));
                run.artifact(
                    format!("predictions/{}/{}", s.model_id, s.fold),
                    RunLayout::fold_predictions(&s.model_id, s.fold),
                );
            }
            Ok(summaries)
        })
    }

    /// Assembles the OOF matrix, enforcing the leakage guard.
    pub fn oof(&mut self) -> Result<OofMatrix, PipelineError> {
        self.require(Stage::Train)?;
        self.run_stage(Stage::Oof, |run| {
            let folds = run.load_folds()?;
            let model_ids = run.model_ids();
            let mut predictions = HashMap::new();
            for m in &model_ids {
                for fold in 0..folds.k() {
                    let pred = PredictionMatrix::load(m, run.path(&RunLayout::fold_predictions(m, fold)))?;
                    predictions.insert((m.clone(), fold), pred);
                }
            }
            let labels = run.inputs.truth.labels().to_vec();
            let oof = assemble_oof(&model_ids, &labels, &predictions, &folds)?;
            debug_assert_eq!(oof.width(), model_ids.len() * labels.len());
            oof.save(run.path(RunLayout::OOF))?;
            run.artifact("oof", RunLayout::OOF);
            Ok(oof)
        })
    }

    /// Stratified hold-out split of the OOF rows and the meta-learner fit.
    pub fn stack(&mut self) -> Result<GbdtMetaLearner, PipelineError> {
        self.require(Stage::Oof)?;
        self.run_stage(Stage::Stack, |run| {
            let oof = run.load_oof()?;
            let seed = run.seed("holdout");
            let config = run.config().clone();
            let parts = holdout_split(&oof, &run.inputs.truth, config.oof_holdout_fraction, seed)?;
            write_holdout(&run.path(RunLayout::HOLDOUT), &parts.fit.sample_ids, &parts.eval.sample_ids)?;
            run.artifact("holdout", RunLayout::HOLDOUT);
            let meta = fit_meta(&parts.fit, &parts.fit_truth, &config.gbdt, config.base_score)?;
            let path = run.path(RunLayout::META_MODEL);
            ensure_parent(&path)?;
            meta.save(&path)?;
            run.artifact("meta_model", RunLayout::META_MODEL);
            Ok(meta)
        })
    }

    /// Single models on the full OOF matrix and on the hold-out rows, and the
    /// meta-learner on the hold-out rows.
    pub fn eval(&mut self) -> Result<Evaluation, PipelineError> {
        self.require(Stage::Stack)?;
        self.run_stage(Stage::Eval, |run| {
            let threshold = run.config().threshold;
            let oof = run.load_oof()?;
            let meta = run.load_meta()?;
            let truth = &run.inputs.truth;
            if oof.sample_ids != truth.sample_ids() {
                return Err(StackingError::Misaligned.into());
            }
            let (fit_ids, eval_ids) = read_holdout(&run.path(RunLayout::HOLDOUT))?;
            let row_of: HashMap<&str, usize> = oof.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let eval_rows = eval_ids
                .iter()
                .map(|id| row_of.get(id.as_str()).copied().ok_or_else(|| StackingError::UnknownSample(id.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            let eval_oof = oof.select_rows(&eval_rows);
            let eval_truth = truth.select_rows(&eval_rows);

            let mut written = Vec::new();
            let mut singles_oof = Vec::new();
            let mut singles_holdout = Vec::new();
            for m in run.model_ids() {
                let pred = oof.model_predictions(&m)?;
                let report = macro_report(&pred, truth, threshold)?;
                write_json(&run.path(&RunLayout::metrics(&m)), &report)?;
                written.push((format!("metrics/{m}"), RunLayout::metrics(&m)));
                for path in write_roc_files(run.layout.root(), &m, &pred, truth)? {
                    written.push((format!("roc/{m}/{}", file_stem(&path)), relative(run.layout.root(), &path)));
                }
                singles_oof.push(report);
                singles_holdout.push(macro_report(&eval_oof.model_predictions(&m)?, &eval_truth, threshold)?);
            }
            let meta_pred = predict_meta(&meta, &eval_oof)?;
            let path = run.path(RunLayout::META_PREDICTIONS);
            ensure_parent(&path)?;
            meta_pred.save(&path)?;
            written.push(("meta_predictions".into(), RunLayout::META_PREDICTIONS.into()));
            let meta_holdout = macro_report(&meta_pred, &eval_truth, threshold)?;
            write_json(&run.path(&RunLayout::metrics("meta")), &meta_holdout)?;
            written.push(("metrics/meta".into(), RunLayout::metrics("meta")));
            for path in write_roc_files(run.layout.root(), "meta", &meta_pred, &eval_truth)? {
                written.push((format!("roc/meta/{}", file_stem(&path)), relative(run.layout.root(), &path)));
            }
            let evaluation =
                Evaluation { singles_oof, singles_holdout, meta_holdout, n_fit: fit_ids.len(), n_eval: eval_ids.len() };
            write_json(&run.path(RunLayout::EVALUATION), &evaluation)?;
            written.push(("evaluation".into(), RunLayout::EVALUATION.into()));
            for (name, rel) in written {
                run.artifact(name, rel);
            }
            Ok(evaluation)
        })
    }

    /// Consolidated `report.json` plus per-label importance CSVs.
    pub fn report(&mut self) -> Result<RunReport, PipelineError> {
        self.require(Stage::Eval)?;
        self.run_stage(Stage::Report, |run| {
            let report = build_report(run)?;
            for entry in &report.importance {
                let rel = RunLayout::importance(&entry.label);
                let path = run.path(&rel);
                ensure_parent(&path)?;
                let file = std::io::BufWriter::new(std::fs::File::create(&path)?);
                crate::stacking::write_importance_csv(&entry.top, entry.top.len(), file)?;
                run.artifact(format!("importance/{}", entry.label), rel);
            }
            write_json(&run.path(RunLayout::REPORT), &report)?;
            run.artifact("report", RunLayout::REPORT);
            let missing = run.ledger.missing_artifacts(&run.layout);
            if !missing.is_empty() {
                return Err(PipelineError::IncompleteRun(format!("missing artifacts: {}", missing.join(", "))));
            }
            Ok(report)
        })
    }

    /// Runs every stage in order.
    pub fn run_all(&mut self) -> Result<RunReport, PipelineError> {
        self.split()?;
        self.tune()?;
        self.train()?;
        self.oof()?;
        self.stack()?;
        self.eval()?;
        self.report()
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Creates a run in `dir` and executes the whole pipeline.
pub fn run_pipeline(
    dir: impl Into<PathBuf>,
    config: PipelineConfig,
    manifest: impl AsRef<Path>,
    features: impl AsRef<Path>,
) -> Result<(RunLedger, RunReport), PipelineError> {
    let mut run = Run::create(dir, config, manifest, features)?;
    let report = run.run_all()?;
    Ok((run.ledger.clone(), report))
}
