//! `stackfold`: run the stacking pipeline stage by stage or end to end.
//!
//! Exit codes: 0 success, 2 invalid input, 3 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use stackfold_core::config::PipelineConfig;
use stackfold_core::explain::{integrated_gradients, occlusion, saliency, single_feature_windows, write_attribution_csv};
use stackfold_core::features::FeatureMatrix;
use stackfold_core::pipeline::external::{evaluate_external, write_external, ExternalTarget};
use stackfold_core::pipeline::{load_inputs, validate_inputs, PipelineError, Run, RunLedger, RunLayout};
use stackfold_core::simulate::{simulate, write_benchmark, SyntheticBenchmarkSpec, DEFAULT_PREVALENCE};
use stackfold_core::taxonomy::{load_mapping, rfmid_preset, LabelMapping};

#[derive(Parser)]
#[command(name = "stackfold", version, about = "Multilabel K-fold training with out-of-fold GBDT stacking")]
struct Cli {
    /// Pipeline config (JSON); unset fields take their defaults.
    #[arg(long, global = true, env = "STACKFOLD_CONFIG")]
    config: Option<PathBuf>,
    /// Root seed; applies when a run is created.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for tuning and training (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Decision threshold for F1, precision and recall.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Let pruned trials count toward the pruning median.
    #[arg(long, global = true)]
    median_include_pruned: bool,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the config, manifest and features without writing anything.
    Validate(InputArgs),
    /// Generate a synthetic benchmark (manifest, features, config).
    Simulate(SimulateArgs),
    /// Create a run and assign stratified folds.
    Split(CreateArgs),
    /// Search base-learner hyperparameters.
    Tune(RunArgs),
    /// Train every (model, fold) pair.
    Train(RunArgs),
    /// Assemble the out-of-fold prediction matrix.
    Oof(RunArgs),
    /// Split off the hold-out rows and fit the meta-learner.
    Stack(RunArgs),
    /// Score single models and the meta-learner.
    Eval(RunArgs),
    /// Zero-shot evaluation on an external dataset.
    EvalExternal(ExternalArgs),
    /// Feature attributions for one sample.
    Explain(ExplainArgs),
    /// Write the consolidated report.
    Report(RunArgs),
    /// Create a run and execute every stage.
    Pipeline(CreateArgs),
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
}

#[derive(Args)]
struct CreateArgs {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    inputs: InputArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Benchmark spec (JSON); flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_labels: Option<usize>,
    #[arg(long)]
    n_models: Option<usize>,
    #[arg(long)]
    co_occurrence: Option<f64>,
}

#[derive(Args)]
struct ExternalArgs {
    #[arg(long)]
    run: PathBuf,
    /// `meta` or a base model id.
    #[arg(long, default_value = "meta")]
    model: String,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Label mapping file, or `rfmid` for the bundled preset.
    #[arg(long)]
    mapping: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Saliency,
    IntegratedGradients,
    Occlusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// Training feature means.
    Means,
    Zeros,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    model: String,
    /// Fold model to explain; defaults to the one that held the sample out.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    sample: String,
    #[arg(long)]
    label: String,
    #[arg(long, value_enum, default_value = "integrated-gradients")]
    method: Method,
    /// Integration steps.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Integrated-gradients baseline and occlusion fill.
    #[arg(long, value_enum, default_value = "means")]
    baseline: Baseline,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Invalid(String),
    Stage(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Stage(e.to_string())
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn stage(e: impl std::fmt::Display) -> Failure {
    Failure::Stage(e.to_string())
}

type CliResult = Result<(), Failure>;

fn print_json(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
}

impl Cli {
    /// Config file (or defaults) with command-line overrides applied.
    fn pipeline_config(&self) -> Result<PipelineConfig, Failure> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load(path).map_err(invalid)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(jobs) = self.jobs {
            config.jobs = jobs;
        }
        if let Some(threshold) = self.threshold {
            config.threshold = threshold;
        }
        if self.median_include_pruned {
            config.search.pruner.include_pruned = true;
        }
        config.validate().map_err(invalid)?;
        Ok(config)
    }

    /// Opens an existing run; only `--jobs` may change after creation.
    fn open_run(&self, dir: &Path) -> Result<Run, Failure> {
        if self.seed.is_some() || self.threshold.is_some() || self.median_include_pruned {
            return Err(invalid("--seed, --threshold and --median-include-pruned apply when a run is created (split or pipeline)"));
        }
        let mut run = Run::open(dir)?;
        if let Some(jobs) = self.jobs {
            run.set_jobs(jobs);
        }
        Ok(run)
    }
}

fn cmd_validate(cli: &Cli, args: &InputArgs) -> CliResult {
    let config = cli.pipeline_config()?;
    let inputs = load_inputs(&args.manifest, &args.features)?;
    let summary = validate_inputs(&config, &inputs)?;
    print_json(json!({ "valid": true, "inputs": summary }));
    Ok(())
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> CliResult {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(invalid)?;
            serde_json::from_str::<SyntheticBenchmarkSpec>(&text).map_err(invalid)?
        }
        None => SyntheticBenchmarkSpec::default(),
    };
    if let Some(n) = args.n_samples {
        spec.n_samples = n;
    }
    if let Some(n) = args.n_labels {
        if n != spec.prevalence.len() && n <= DEFAULT_PREVALENCE.len() {
            spec.prevalence = DEFAULT_PREVALENCE[..n].to_vec();
        }
        spec.n_labels = n;
    }
    if let Some(n) = args.n_models {
        spec.n_models = n;
    }
    if let Some(c) = args.co_occurrence {
        spec.co_occurrence = c;
    }
    let seed = cli.seed.unwrap_or(0);
    let bench = simulate(&spec, seed).map_err(|e| match e {
        stackfold_core::simulate::SimulateError::InvalidSpec(_) => invalid(e),
        other => stage(other),
    })?;
    let files = write_benchmark(&bench, &args.out).map_err(stage)?;
    let config = spec.pipeline_config(seed);
    let config_path = args.out.join("config.json");
    std::fs::write(&config_path, config.to_json() + "\n").map_err(stage)?;
    print_json(json!({
        "manifest": files.manifest,
        "features": files.features,
        "config": config_path,
        "n_samples": spec.n_samples,
        "n_labels": spec.n_labels,
    }));
    Ok(())
}

fn cmd_split(cli: &Cli, args: &CreateArgs) -> CliResult {
    let mut run = Run::create(&args.run, cli.pipeline_config()?, &args.inputs.manifest, &args.inputs.features)?;
    let folds = run.split()?;
    print_json(json!({ "run_id": run.ledger().run_id, "fold_sizes": folds.fold_sizes() }));
    Ok(())
}

fn cmd_stage(cli: &Cli, args: &RunArgs, which: &str) -> CliResult {
    let mut run = cli.open_run(&args.run)?;
    let summary = match which {
        "tune" => serde_json::to_value(run.tune()?),
        "train" => serde_json::to_value(run.train()?),
        "oof" => {
            let oof = run.oof()?;
            Ok(json!({ "n_samples": oof.n_samples(), "width": oof.width() }))
        }
        "stack" => {
            let meta = run.stack()?;
            Ok(json!({ "labels": meta.labels(), "degenerate_labels": meta.degenerate_labels() }))
        }
        "eval" => {
            let e = run.eval()?;
            Ok(json!({
                "singles_oof": e.singles_oof.iter().map(|r| json!({"model_id": r.model_id, "macro_auc": r.macro_auc})).collect::<Vec<_>>(),
                "meta_holdout_macro_auc": e.meta_holdout.macro_auc,
            }))
        }
        "report" => {
            run.report()?;
            Ok(json!({ "report": run.layout().path(RunLayout::REPORT) }))
        }
        _ => unreachable!("stage names are fixed"),
    }
    .map_err(stage)?;
    print_json(summary);
    Ok(())
}

fn cmd_pipeline(cli: &Cli, args: &CreateArgs) -> CliResult {
    let mut run = Run::create(&args.run, cli.pipeline_config()?, &args.inputs.manifest, &args.inputs.features)?;
    let report = run.run_all()?;
    print_json(json!({
        "run_id": report.run_id,
        "report": run.layout().path(RunLayout::REPORT),
        "oof_width": report.oof_width,
        "max_single_oof_macro_auc": report.max_single_oof_auc(),
        "meta_holdout_macro_auc": report.meta_holdout_auc(),
    }));
    Ok(())
}

fn cmd_eval_external(cli: &Cli, args: &ExternalArgs) -> CliResult {
    let ledger = RunLedger::load(&RunLayout::new(&args.run)).map_err(|e| invalid(format!("cannot read run ledger: {e}")))?;
    let mapping: Option<LabelMapping> = match args.mapping.as_deref() {
        None => None,
        Some("rfmid") => Some(LabelMapping::new(rfmid_preset().entries, &ledger.schema).map_err(invalid)?),
        Some(path) => Some(load_mapping(path, &ledger.schema).map_err(invalid)?),
    };
    let features = FeatureMatrix::load(&args.features).map_err(invalid)?;
    let target = ExternalTarget::parse(&args.model);
    let evaluation = evaluate_external(&args.run, &target, &features, &args.manifest, mapping.as_ref(), cli.threshold)?;
    let written = write_external(&evaluation, &target, &args.out)?;
    print_json(json!({
        "model_id": evaluation.report.model_id,
        "n_samples": evaluation.report.n_samples,
        "macro_auc": evaluation.report.macro_auc,
        "evaluated_labels": evaluation.truth.labels(),
        "unmapped_labels": evaluation.report.unmapped_labels,
        "files": written,
    }));
    Ok(())
}

fn cmd_explain(cli: &Cli, args: &ExplainArgs) -> CliResult {
    let run = cli.open_run(&args.run)?;
    let features = &run.inputs().features;
    let row = features
        .sample_ids
        .iter()
        .position(|s| *s == args.sample)
        .ok_or_else(|| invalid(format!("sample `{}` is not in the run", args.sample)))?;
    let fold = match args.fold {
        Some(f) => f,
        None => run.load_folds()?.fold_of()[row],
    };
    let model = run.load_model(&args.model, fold)?;
    let x = features.values.row(row).to_vec();
    let reference = match args.baseline {
        Baseline::Means => features.column_means().to_vec(),
        Baseline::Zeros => vec![0.0; x.len()],
    };
    let map = match args.method {
        Method::Saliency => saliency(&model, &args.sample, &x, &args.label),
        Method::IntegratedGradients => integrated_gradients(&model, &args.sample, &x, &reference, args.steps, &args.label),
        Method::Occlusion => {
            occlusion(&model, &args.sample, &x, &args.label, &single_feature_windows(x.len()), &reference)
        }
    }
    .map_err(invalid)?;
    match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(stage)?;
            write_attribution_csv(&map, &features.names, std::io::BufWriter::new(file)).map_err(stage)?;
        }
        None => write_attribution_csv(&map, &features.names, std::io::stdout().lock()).map_err(stage)?,
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Validate(a) => cmd_validate(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Split(a) => cmd_split(cli, a),
        Command::Tune(a) => cmd_stage(cli, a, "tune"),
        Command::Train(a) => cmd_stage(cli, a, "train"),
        Command::Oof(a) => cmd_stage(cli, a, "oof"),
        Command::Stack(a) => cmd_stage(cli, a, "stack"),
        Command::Eval(a) => cmd_stage(cli, a, "eval"),
        Command::Report(a) => cmd_stage(cli, a, "report"),
        Command::EvalExternal(a) => cmd_eval_external(cli, a),
        Command::Explain(a) => cmd_explain(cli, a),
        Command::Pipeline(a) => cmd_pipeline(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("stage failed: {msg}");
            ExitCode::from(3)
        }
    }
}
