//! Run directory layout and the run ledger.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::schema::LabelSchema;

/// Paths inside a run directory. Everything the ledger records is relative
/// to the run root.
#[derive(Debug, Clone)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub const LEDGER: &'static str = "ledger.json";
    pub const FOLDS: &'static str = "folds.csv";
    pub const PARAMS: &'static str = "tune/params.json";
    pub const OOF: &'static str = "oof.csv";
    pub const HOLDOUT: &'static str = "holdout.csv";
    pub const META_MODEL: &'static str = "meta/meta_model.json";
    pub const META_PREDICTIONS: &'static str = "meta/predictions_eval.csv";
    pub const EVALUATION: &'static str = "reports/evaluation.json";
    pub const REPORT: &'static str = "report.json";

    pub fn trial_log(model_id: &str) -> String {
        format!("tune/{model_id}.trials.jsonl")
    }

    pub fn model(model_id: &str, fold: usize) -> String {
        format!("models/{model_id}/fold{fold}.json")
    }

    pub fn fold_predictions(model_id: &str, fold: usize) -> String {
        format!("predictions/{model_id}/fold{fold}.csv")
    }

    pub fn metrics(block: &str) -> String {
        format!("reports/{block}.json")
    }

    pub fn roc(block: &str, label: &str) -> String {
        format!("roc/{block}/{label}.csv")
    }

    pub fn importance(label: &str) -> String {
        format!("importance/{label}.csv")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Split,
    Tune,
    Train,
    Oof,
    Stack,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Split, Stage::Tune, Stage::Train, Stage::Oof, Stage::Stack, Stage::Eval, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Tune => "tune",
            Stage::Train => "train",
            Stage::Oof => "oof",
            Stage::Stack => "stack",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub started_ms: u64,
    pub finished_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    /// As given on the command line.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub run_id: String,
    pub config: PipelineConfig,
    /// Label schema inferred from the training manifest.
    pub schema: LabelSchema,
    pub inputs: IndexMap<String, InputRecord>,
    /// Named sub-seeds handed to each stage.
    pub seeds: IndexMap<String, u64>,
    /// Artifact name → path relative to the run root.
    pub artifacts: IndexMap<String, String>,
    pub stages: Vec<StageRecord>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: impl AsRef<Path>) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunLedger {
    /// The run id hashes the config and the input digests, so identical
    /// inputs always map to the same id. The worker count cannot change any
    /// artifact and is left out.
    pub fn new(config: PipelineConfig, schema: LabelSchema, inputs: IndexMap<String, InputRecord>) -> Self {
        let mut key = PipelineConfig { jobs: 0, ..config.clone() }.to_json();
        for (name, input) in &inputs {
            key.push_str(&format!("\n{name}={}", input.sha256));
        }
        let run_id = sha256_hex(key.as_bytes())[..16].to_string();
        Self { run_id, config, schema, inputs, seeds: IndexMap::new(), artifacts: IndexMap::new(), stages: Vec::new() }
    }

    pub fn record_artifact(&mut self, name: impl Into<String>, relative: impl Into<String>) {
        self.artifacts.insert(name.into(), relative.into());
    }

    pub fn record_seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_owned(), seed);
    }

    /// Latest record for `stage`.
    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|r| r.stage == stage)
    }

    pub fn is_completed(&self, stage: Stage) -> bool {
        self.stage(stage).is_some_and(|r| r.status == StageStatus::Completed)
    }

    /// Recorded artifacts that are absent from `layout`.
    pub fn missing_artifacts(&self, layout: &RunLayout) -> Vec<String> {
        self.artifacts.values().filter(|p| !layout.path(p).is_file()).cloned().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }

    pub fn save(&self, layout: &RunLayout) -> std::io::Result<()> {
        std::fs::create_dir_all(layout.root())?;
        let target = layout.path(RunLayout::LEDGER);
        let tmp = layout.path("ledger.json.tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(tmp, target)
    }

    pub fn load(layout: &RunLayout) -> Result<Self, serde_json::Error> {
        let text = std::fs::read_to_string(layout.path(RunLayout::LEDGER)).map_err(serde_json::Error::io)?;
        serde_json::from_str(&text)
    }
}
