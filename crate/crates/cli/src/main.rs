//! `ehrml` — one binary chaining the whole workflow: assemble → audit →
//! label → featurize → train → report, plus a synthetic-data generator so
//! the pipeline can be exercised without any external dataset.
//!
//! Every stage reads and writes plain files (CSV for row data, JSON for
//! reports and models), so any stage can be rerun or replaced on its own.
//! Settings come from flags or from a YAML config file (`--config`); a flag
//! always overrides its config key. Exit codes: 0 on success, 1 for usage
//! errors, 2 when a stage fails.

mod config;
mod stages;

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ehrml::audit::AuditReport;
use ehrml::automl::{write_trial_log, FittedPipeline, TrainConfig};
use ehrml::featurize::{FeatureManifest, FeatureMatrix};
use ehrml::metrics::{self, MetricReport};
use ehrml::problems::{parse_duration, LabelTimes, ProblemName, ProblemSpec, TaskType};
use ehrml::report::{metadata_report, summary_line, RunReport};
use ehrml::synth::{SynthConfig, SynthShape};

use config::FileConfig;
use stages::*;

/// Default output directory when neither `--out` nor the config set one.
const OUT_ENV: &str = "EHRML_OUT";

#[derive(Parser)]
#[command(
    name = "ehrml",
    version,
    about = "AutoML for relational EHR data: assemble, audit, label, featurize, train, report",
    arg_required_else_help = true
)]
struct Cli {
    /// YAML config file; every flag overrides its matching config key.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory (default: $EHRML_OUT, then ./ehrml_out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Upper bound on worker threads per stage (stages currently run on one).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Directory of CSVs, one file per resource.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Schema file declaring resources, variables, and relations.
    #[arg(long, value_name = "FILE")]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct ProblemArgs {
    /// Prediction problem: noshow, los_classification, los_regression,
    /// readmission, diagnosis, or mortality.
    #[arg(long, value_name = "NAME")]
    problem: Option<String>,
    /// Readmission window, e.g. 30d.
    #[arg(long, value_name = "DURATION")]
    window: Option<String>,
    /// Long-stay threshold in days for the length-of-stay problems.
    #[arg(long, value_name = "DAYS")]
    threshold_days: Option<i64>,
    /// Diagnosis code the `diagnosis` problem predicts.
    #[arg(long, value_name = "CODE")]
    diagnosis_code: Option<String>,
    /// Cutoff offset from the anchor time, e.g. -1d.
    #[arg(long, value_name = "DURATION", allow_hyphen_values = true)]
    offset: Option<String>,
}

#[derive(Args)]
struct FeaturizeArgs {
    /// Maximum relation depth for generated features.
    #[arg(long, value_name = "N")]
    depth: Option<usize>,
    /// Aggregation primitives, comma-separated.
    #[arg(long, value_name = "LIST")]
    agg: Option<String>,
    /// Transform primitives, comma-separated.
    #[arg(long, value_name = "LIST")]
    trans: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Task type: binary or regression.
    #[arg(long, value_name = "TASK")]
    task: Option<String>,
    /// Selection metric: accuracy, f1_macro, auc, mse, mae, or r2.
    #[arg(long, value_name = "METRIC")]
    metric: Option<String>,
    /// Total tuning trials across all estimator families.
    #[arg(long, value_name = "N")]
    budget: Option<usize>,
    /// Cross-validation folds.
    #[arg(long, value_name = "K")]
    cv: Option<usize>,
    /// Seed for splits, tuning, and estimators.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Train fraction of the train/test split.
    #[arg(long, value_name = "RATIO")]
    ratio: Option<f64>,
    /// Estimator families to consider, comma-separated (default: all).
    #[arg(long, value_name = "LIST")]
    estimators: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load a data directory against a schema and write the assembly manifest.
    Assemble {
        #[command(flatten)]
        io: DataArgs,
    },
    /// Assemble, then report missing values, distributions, and cohort rates.
    Audit {
        #[command(flatten)]
        io: DataArgs,
        /// Distribution expectations file.
        #[arg(long, value_name = "FILE")]
        expect: Option<PathBuf>,
        /// `entity.variable` flags for the cohort summary, comma-separated.
        #[arg(long, value_name = "LIST")]
        binary: Option<String>,
    },
    /// Generate cutoff-time labels for a prediction problem.
    Label {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        problem: ProblemArgs,
    },
    /// Compute the feature matrix for an existing label file.
    Featurize {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        problem: ProblemArgs,
        /// Label CSV from the label stage.
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
        #[command(flatten)]
        featurize: FeaturizeArgs,
    },
    /// Tune and fit pipelines on a feature matrix; write trial log and model.
    Train {
        /// Feature CSV from the featurize stage.
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        /// Feature-definition sidecar (default: <features>.manifest.json).
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        /// Label CSV from the label stage.
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a feature matrix with a saved model.
    Predict {
        /// Model artifact from the train stage.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a saved model on held-out features and labels.
    Report {
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        test_features: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        test_labels: Option<PathBuf>,
        /// Bootstrap resamples for confidence intervals (0 disables).
        #[arg(long, value_name = "N")]
        bootstrap: Option<usize>,
        /// Seed for the bootstrap resampler.
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
    },
    /// Run every stage in order, writing all artifacts to the output dir.
    Run {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        featurize: FeaturizeArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_name = "FILE")]
        expect: Option<PathBuf>,
        #[arg(long, value_name = "LIST")]
        binary: Option<String>,
        #[arg(long, value_name = "N")]
        bootstrap: Option<usize>,
    },
    /// Generate a synthetic dataset plus its schema file.
    Synth {
        /// Dataset shape: appointment or hospital.
        #[arg(long, value_name = "SHAPE")]
        shape: Option<String>,
        #[arg(long, value_name = "N")]
        patients: Option<usize>,
        /// Appointments or encounters to generate, depending on shape.
        #[arg(long, value_name = "N")]
        events: Option<usize>,
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
        /// Rate override, e.g. --rate noshow=0.3 (repeatable).
        #[arg(long = "rate", value_name = "KEY=VALUE")]
        rates: Vec<String>,
    },
}

/// Failure modes with distinct exit codes.
enum Failure {
    /// Bad flags or config values; exit 1.
    Usage(String),
    /// A pipeline stage blew up; exit 2.
    Stage { stage: &'static str, source: anyhow::Error },
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Wraps a stage result so failures carry the stage name.
fn stage<T>(name: &'static str, result: anyhow::Result<T>) -> Result<T, Failure> {
    result.map_err(|source| Failure::Stage { stage: name, source })
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            e.print().ok();
            std::process::exit(if ok { 0 } else { 1 });
        }
    };
    match execute(cli) {
        Ok(()) => {}
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(Failure::Stage { stage, source }) => {
            eprintln!("error: stage {stage}: {source:#}");
            std::process::exit(2);
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(path) => FileConfig::load(path).map_err(usage)?,
        None => FileConfig::default(),
    };
    if let Some(jobs) = cli.jobs.or(cfg.jobs) {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("ehrml_out"));

    match cli.command {
        Command::Assemble { ref io } => cmd_assemble(io, &cfg, &out_dir),
        Command::Audit { ref io, ref expect, ref binary } => {
            cmd_audit(io, expect, binary, &cfg, &out_dir)
        }
        Command::Label { ref io, ref problem } => cmd_label(io, problem, &cfg, &out_dir),
        Command::Featurize { ref io, ref problem, ref labels, ref featurize } => {
            cmd_featurize(io, problem, labels, featurize, &cfg, &out_dir)
        }
        Command::Train { ref features, ref manifest, ref labels, ref train } => {
            cmd_train(features, manifest, labels, train, &cfg, &out_dir)
        }
        Command::Predict { ref model, ref features, ref manifest } => {
            cmd_predict(model, features, manifest, &cfg, &out_dir)
        }
        Command::Report {
            ref model,
            ref test_features,
            ref manifest,
            ref test_labels,
            bootstrap,
            seed,
        } => cmd_report(model, test_features, manifest, test_labels, bootstrap, seed, &cfg, &out_dir),
        Command::Run {
            ref io,
            ref problem,
            ref featurize,
            ref train,
            ref expect,
            ref binary,
            bootstrap,
        } => cmd_run(io, problem, featurize, train, expect, binary, bootstrap, &cfg, &out_dir),
        Command::Synth { ref shape, patients, events, seed, ref rates } => {
            cmd_synth(shape, patients, events, seed, rates, &cfg, &out_dir)
        }
    }
}

// ---------------------------------------------------------------------------
// Settings resolution (flag > config > default); errors here are usage errors.

fn require_path(
    flag: &Option<PathBuf>,
    cfg: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, Failure> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| usage(format!("missing --{what} (or `{what}:` in the config)")))
}

fn split_list(text: &str) -> Vec<String> {
    text.split(',')
        .map(|p| p.trim().to_owned())
        .filter(|p| !p.is_empty())
        .collect()
}

fn list_setting(flag: &Option<String>, cfg: &Option<Vec<String>>) -> Option<Vec<String>> {
    flag.as_deref().map(split_list).or_else(|| cfg.clone())
}

fn resolve_problem(args: &ProblemArgs, cfg: &FileConfig) -> Result<ProblemSpec, Failure> {
    let text = args
        .problem
        .clone()
        .or_else(|| cfg.problem.clone())
        .ok_or_else(|| usage("missing --problem (or `problem:` in the config)"))?;
    let name: ProblemName = text
        .parse()
        .map_err(|_| usage(format!("unknown problem `{text}`")))?;
    let mut spec = ProblemSpec::predefined(name);
    if let Some(w) = args.window.clone().or_else(|| cfg.window.clone()) {
        spec.params.readmission_window =
            parse_duration(&w).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(t) = args.threshold_days.or(cfg.threshold_days) {
        spec.params.threshold_days = t;
    }
    if let Some(c) = args.diagnosis_code.clone().or_else(|| cfg.diagnosis_code.clone()) {
        spec.params.diagnosis_code = Some(c);
    }
    if let Some(o) = args.offset.clone().or_else(|| cfg.offset.clone()) {
        spec.offset = parse_duration(&o).map_err(|e| usage(e.to_string()))?;
    }
    Ok(spec)
}

struct FeaturizeSettings {
    depth: usize,
    aggs: Vec<ehrml::featurize::AggPrimitive>,
    trans: Vec<ehrml::featurize::TransformPrimitive>,
}

fn resolve_featurize(args: &FeaturizeArgs, cfg: &FileConfig) -> Result<FeaturizeSettings, Failure> {
    let depth = args.depth.or(cfg.depth).unwrap_or(2);
    let aggs = match list_setting(&args.agg, &cfg.agg) {
        Some(names) => parse_aggs(&names).map_err(usage)?,
        None => ehrml::featurize::AggPrimitive::ALL.to_vec(),
    };
    let trans = match list_setting(&args.trans, &cfg.trans) {
        Some(names) => parse_trans(&names).map_err(usage)?,
        None => ehrml::featurize::TransformPrimitive::ALL.to_vec(),
    };
    Ok(FeaturizeSettings { depth, aggs, trans })
}

fn resolve_train(args: &TrainArgs, cfg: &FileConfig, task: TaskType) -> Result<TrainConfig, Failure> {
    let mut t = TrainConfig::new(task);
    if let Some(m) = args.metric.clone().or_else(|| cfg.metric.clone()) {
        t.metric = parse_metric(&m).map_err(usage)?;
    }
    if let Some(b) = args.budget.or(cfg.budget) {
        if b == 0 {
            return Err(usage("--budget must be at least 1"));
        }
        t.budget = b;
    }
    if let Some(k) = args.cv.or(cfg.cv) {
        if k < 2 {
            return Err(usage("--cv must be at least 2"));
        }
        t.cv_folds = k;
    }
    if let Some(r) = args.ratio.or(cfg.train_ratio) {
        if !(r > 0.0 && r < 1.0) {
            return Err(usage("--ratio must be strictly between 0 and 1"));
        }
        t.train_ratio = r;
    }
    if let Some(s) = args.seed.or(cfg.seed) {
        t.seed = s;
    }
    if let Some(e) = list_setting(&args.estimators, &cfg.estimators) {
        t.estimators = Some(e);
    }
    Ok(t)
}

fn ensure_dir(dir: &std::path::Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| anyhow::anyhow!("cannot create output dir `{}`: {e}", dir.display()))
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_assemble(io: &DataArgs, cfg: &FileConfig, out: &PathBuf) -> Result<(), Failure> {
    let data = require_path(&io.data, &cfg.data, "data")?;
    let schema = require_path(&io.schema, &cfg.schema, "schema")?;
    let registry = stage("assemble", load_registry(&schema))?;
    let (_es, manifest) = stage("assemble", assemble_stage(&data, &registry))?;
    stage("assemble", ensure_dir(out))?;
    let path = out.join("manifest.json");
    stage("assemble", write_json(&path, &manifest))?;
    print!("{}", manifest.to_text());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_audit(
    io: &DataArgs,
    expect: &Option<PathBuf>,
    binary: &Option<String>,
    cfg: &FileConfig,
    out: &PathBuf,
) -> Result<(), Failure> {
    let data = require_path(&io.data, &cfg.data, "data")?;
    let schema = require_path(&io.schema, &cfg.schema, "schema")?;
    let expect = expect.clone().or_else(|| cfg.expect.clone());
    let binary_vars = list_setting(binary, &cfg.binary_variables).unwrap_or_default();
    let registry = stage("assemble", load_registry(&schema))?;
    let (es, _manifest) = stage("assemble", assemble_stage(&data, &registry))?;
    let report = stage("audit", audit_stage(&es, expect.as_deref(), &binary_vars))?;
    stage("audit", ensure_dir(out))?;
    let path = out.join("audit_report.json");
    stage("audit", write_json(&path, &report))?;
    print!("{}", report.to_text());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_label(
    io: &DataArgs,
    problem: &ProblemArgs,
    cfg: &FileConfig,
    out: &PathBuf,
) -> Result<(), Failure> {
    let data = require_path(&io.data, &cfg.data, "data")?;
    let schema = require_path(&io.schema, &cfg.schema, "schema")?;
    let spec = resolve_problem(problem, cfg)?;
    let registry = stage("assemble", load_registry(&schema))?;
    let (es, _manifest) = stage("assemble", assemble_stage(&data, &registry))?;
    let labels = stage("label", label_stage(&es, &spec))?;
    stage("label", ensure_dir(out))?;
    let path = out.join("labels.csv");
    stage("label", labels.write_csv(&path).map_err(anyhow::Error::from))?;
    let definition = labels.definition();
    print!("{}", RunReport { definition: Some(&definition), ..Default::default() }.to_text());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_featurize(
    io: &DataArgs,
    problem: &ProblemArgs,
    labels: &Option<PathBuf>,
    featurize: &FeaturizeArgs,
    cfg: &FileConfig,
    out: &PathBuf,
) -> Result<(), Failure> {
    let data = require_path(&io.data, &cfg.data, "data")?;
    let schema = require_path(&io.schema, &cfg.schema, "schema")?;
    let labels_path = labels
        .clone()
        .ok_or_else(|| usage("missing --labels (run the label stage first)"))?;
    let spec = resolve_problem(problem, cfg)?;
    let settings = resolve_featurize(featurize, cfg)?;
    let registry = stage("assemble", load_registry(&schema))?;
    let (es, _manifest) = stage("assemble", assemble_stage(&data, &registry))?;
    let label_times = stage(
        "featurize",
        LabelTimes::read_csv(&labels_path, spec).map_err(anyhow::Error::from),
    )?;
    let (fman, matrix) = stage(
        "featurize",
        featurize_stage(&es, &label_times, &settings.aggs, &settings.trans, settings.depth),
    )?;
    stage("featurize", ensure_dir(out))?;
    let csv_path = out.join("features.csv");
    let sidecar = manifest_sidecar(&csv_path);
    stage("featurize", matrix.write_csv(&csv_path).map_err(anyhow::Error::from))?;
    stage("featurize", fman.save(&sidecar).map_err(anyhow::Error::from))?;
    println!(
        "{} features x {} rows -> {} (definitions: {})",
        matrix.features.len(),
        matrix.row_count(),
        csv_path.display(),
        sidecar.display()
    );
    Ok(())
}

/// Loads a feature CSV through its definition sidecar.
fn load_matrix(
    features: &Option<PathBuf>,
    manifest: &Option<PathBuf>,
    stage_name: &'static str,
) -> Result<(FeatureManifest, FeatureMatrix), Failure> {
    let features = features
        .clone()
        .ok_or_else(|| usage("missing --features (run the featurize stage first)"))?;
    let sidecar = manifest.clone().unwrap_or_else(|| manifest_sidecar(&features));
    let fman = stage(stage_name, FeatureManifest::load(&sidecar).map_err(anyhow::Error::from))?;
    let matrix = stage(
        stage_name,
        FeatureMatrix::read_csv(&features, &fman).map_err(anyhow::Error::from),
    )?;
    Ok((fman, matrix))
}

fn cmd_train(
    features: &Option<PathBuf>,
    manifest: &Option<PathBuf>,
    labels: &Option<PathBuf>,
    train: &TrainArgs,
    cfg: &FileConfig,
    out: &PathBuf,
) -> Result<(), Failure> {
    let labels_path = labels
        .clone()
        .ok_or_else(|| usage("missing --labels (run the label stage first)"))?;
    let task = match train.task.clone().or_else(|| cfg.task.clone()) {
        Some(t) => parse_task(&t).map_err(usage)?,
        None => TaskType::Binary,
    };
    let tconfig = resolve_train(train, cfg, task)?;
    let (_fman, matrix) = load_matrix(features, manifest, "train")?;
    let pairs = stage("train", read_label_pairs(&labels_path))?;
    let y = stage("train", align_labels(&matrix, &pairs))?;
    let outcome = stage("train", train_stage(&matrix, &y, &tconfig))?;
    stage("train", ensure_dir(out))?;
    let log_path = out.join("trial_log.csv");
    let model_path = out.join("model.json");
    stage("train", write_trial_log(&log_path, &outcome.trials).map_err(anyhow::Error::from))?;
    stage("train", outcome.pipeline.save(&model_path).map_err(anyhow::Error::from))?;
    let best = &outcome.trials[outcome.best_trial];
    println!(
        "best trial {} ({}): mean {} = {:.6} over {} folds",
        best.trial_index,
        outcome.pipeline.metadata.spec.estimator,
        tconfig.metric,
        best.mean_score,
        tconfig.cv_folds
    );
    print!("{}", outcome.report.to_text());
    for note in &outcome.notes {
        println!("note: {note}");
    }
    println!("wrote {} and {}", log_path.display(), model_path.display());
    Ok(())
}

fn cmd_predict(
    model: &Option<PathBuf>,
    features: &Option<PathBuf>,
    manifest: &Option<PathBuf>,
    _cfg: &FileConfig,
    out: &PathBuf,
) -> Result<(), Failure> {
    let model_path = model
        .clone()
        .ok_or_else(|| usage("missing --model (run the train stage first)"))?;
    let pipeline = stage("predict", FittedPipeline::load(&model_path).map_err(anyhow::Error::from))?;
    let (_fman, matrix) = load_matrix(features, manifest, "predict")?;
    let rows = all_rows(&matrix);
    let preds = stage("predict", pipeline.predict(&matrix, &rows).map_err(anyhow::Error::from))?;
    let scores = stage(
        "predict",
        pipeline.decision_scores(&matrix, &rows).map_err(anyhow::Error::from),
    )?;
    stage("predict", ensure_dir(out))?;
    let path = out.join("predictions.csv");
    let write = || -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(&path)?;
        match &scores {
            Some(s) => {
                w.write_record(["entity_id", "prediction", "score"])?;
                for (i, id) in matrix.entity_ids.iter().enumerate() {
                    w.write_record([id.as_str(), &preds[i].to_string(), &s[i].to_string()])?;
                }
            }
            None => {
                w.write_record(["entity_id", "prediction"])?;
                for (i, id) in matrix.entity_ids.iter().enumerate() {
                    w.write_record([id.as_str(), &preds[i].to_string()])?;
                }
            }
        }
        Ok(w.flush()?)
    };
    stage("predict", write())?;
    println!("wrote {} predictions to {}", preds.len(), path.display());
    Ok(())
}

/// Adds bootstrap confidence intervals for every headline metric.
fn attach_bootstrap(
    report: &mut MetricReport,
    y: &[f64],
    preds: &[f64],
    scores: Option<&[f64]>,
    resamples: usize,
    seed: u64,
) {
    if resamples == 0 {
        return;
    }
    let mut put = |key: &str, ci: Option<metrics::BootstrapInterval>| {
        if let Some(ci) = ci {
            report.bootstrap.insert(key.to_owned(), ci);
        }
    };
    match report.task_type {
        TaskType::Binary => {
            put(
                "accuracy",
                metrics::bootstrap_ci(|t, p| Some(metrics::accuracy(t, p)), y, preds, resamples, seed, 0.95),
            );
            put(
                "f1_macro",
                metrics::bootstrap_ci(
                    |t, p| {
                        metrics::classification_metrics(t, p, None)
                            .ok()
                            .and_then(|r| r.metrics.get("f1_macro").copied())
                    },
                    y,
                    preds,
                    resamples,
                    seed,
                    0.95,
                ),
            );
            if let Some(s) = scores {
                put("auc", metrics::bootstrap_ci(metrics::auc, y, s, resamples, seed, 0.95));
            }
        }
        TaskType::Regression => {
            let pluck = |key: &'static str| {
                move |t: &[f64], p: &[f64]| {
                    metrics::regression_metrics(t, p).ok().and_then(|r| r.metrics.get(key).copied())
                }
            };
            put("mse", metrics::bootstrap_ci(pluck("mse"), y, preds, resamples, seed, 0.95));
            put("mae", metrics::bootstrap_ci(pluck("mae"), y, preds, resamples, seed, 0.95));
            put("r2", metrics::bootstrap_ci(metrics::r_squared, y, preds, resamples, seed, 0.95));
        }
    }
}

fn evaluate(
    pipeline: &FittedPipeline,
    matrix: &FeatureMatrix,
    y: &[f64],
    rows: &[usize],
    bootstrap: usize,
    seed: u64,
) -> anyhow::Result<MetricReport> {
    let preds = pipeline.predict(matrix, rows)?;
    let scores = pipeline.decision_scores(matrix, rows)?;
    let y_rows: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
    let mut report = match pipeline.metadata.spec.task_type {
        TaskType::Binary => metrics::classification_metrics(&y_rows, &preds, scores.as_deref())?,
        TaskType::Regression => metrics::regression_metrics(&y_rows, &preds)?,
    };
    attach_bootstrap(&mut report, &y_rows, &preds, scores.as_deref(), bootstrap, seed);
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn cmd_report(
    model: &Option<PathBuf>,
    test_features: &Option<PathBuf>,
    manifest: &Option<PathBuf>,
    test_labels: &Option<PathBuf>,
    bootstrap: Option<usize>,
    seed: Option<u64>,
    cfg: &FileConfig,
    out: &PathBuf,
) -> Result<(), Failure> {
    let model_path = model
        .clone()
        .ok_or_else(|| usage("missing --model (run the train stage first)"))?;
    let labels_path = test_labels
        .clone()
        .ok_or_else(|| usage("missing --test-labels"))?;
    let resamples = bootstrap.or(cfg.bootstrap).unwrap_or(0);
    let seed = seed.or(cfg.seed).unwrap_or(42);
    let pipeline = stage("report", FittedPipeline::load(&model_path).map_err(anyhow::Error::from))?;
    let (_fman, matrix) = load_matrix(test_features, manifest, "report")?;
    let pairs = stage("report", read_label_pairs(&labels_path))?;
    let y = stage("report", align_labels(&matrix, &pairs))?;
    let rows = all_rows(&matrix);
    let report = stage("report", evaluate(&pipeline, &matrix, &y, &rows, resamples, seed))?;
    stage("report", ensure_dir(out))?;
    let path = out.join("metric_report.json");
    stage("report", write_json(&path, &report))?;
    print!("{}", report.to_text());
    println!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    io: &DataArgs,
    problem: &ProblemArgs,
    featurize: &FeaturizeArgs,
    train: &TrainArgs,
    expect: &Option<PathBuf>,
    binary: &Option<String>,
    bootstrap: Option<usize>,
    cfg: &FileConfig,
    out: &PathBuf,
) -> Result<(), Failure> {
    let data = require_path(&io.data, &cfg.data, "data")?;
    let schema = require_path(&io.schema, &cfg.schema, "schema")?;
    let spec = resolve_problem(problem, cfg)?;
    let settings = resolve_featurize(featurize, cfg)?;
    if let Some(t) = train.task.clone().or_else(|| cfg.task.clone()) {
        let parsed = parse_task(&t).map_err(usage)?;
        if parsed != spec.task_type {
            return Err(usage(format!(
                "task `{t}` conflicts with problem `{}`",
                spec.name
            )));
        }
    }
    let tconfig = resolve_train(train, cfg, spec.task_type)?;
    let expect = expect.clone().or_else(|| cfg.expect.clone());
    let binary_vars = list_setting(binary, &cfg.binary_variables).unwrap_or_default();
    let resamples = bootstrap.or(cfg.bootstrap).unwrap_or(0);

    // assemble
    let registry = stage("assemble", load_registry(&schema))?;
    let (es, manifest) = stage("assemble", assemble_stage(&data, &registry))?;
    stage("assemble", ensure_dir(out))?;
    stage("assemble", write_json(&out.join("manifest.json"), &manifest))?;
    // audit
    let audit: AuditReport = stage("audit", audit_stage(&es, expect.as_deref(), &binary_vars))?;
    stage("audit", write_json(&out.join("audit_report.json"), &audit))?;
    // label
    let labels = stage("label", label_stage(&es, &spec))?;
    stage("label", labels.write_csv(out.join("labels.csv")).map_err(anyhow::Error::from))?;
    // featurize
    let (fman, matrix) = stage(
        "featurize",
        featurize_stage(&es, &labels, &settings.aggs, &settings.trans, settings.depth),
    )?;
    let features_path = out.join("features.csv");
    stage("featurize", matrix.write_csv(&features_path).map_err(anyhow::Error::from))?;
    stage(
        "featurize",
        fman.save(manifest_sidecar(&features_path)).map_err(anyhow::Error::from),
    )?;
    // train
    let y: Vec<f64> = labels.rows.iter().map(|r| r.label).collect();
    let outcome = stage("train", train_stage(&matrix, &y, &tconfig))?;
    stage(
        "train",
        write_trial_log(&out.join("trial_log.csv"), &outcome.trials).map_err(anyhow::Error::from),
    )?;
    stage("train", outcome.pipeline.save(out.join("model.json")).map_err(anyhow::Error::from))?;
    // report: rescore the untouched test rows so bootstrap intervals can ride
    // along when requested.
    let mut metric_report = outcome.report.clone();
    if resamples > 0 {
        metric_report = stage(
            "report",
            evaluate(&outcome.pipeline, &matrix, &y, &outcome.test_rows, resamples, tconfig.seed),
        )?;
    }
    stage("report", write_json(&out.join("metric_report.json"), &metric_report))?;

    let metadata = metadata_report(&es, &labels, &matrix);
    let definition = labels.definition();
    let full = RunReport {
        manifest: Some(&manifest),
        audit: Some(&audit),
        definition: Some(&definition),
        metadata: Some(&metadata),
        metrics: Some(&metric_report),
    };
    print!("{}", full.to_text());
    for note in &outcome.notes {
        println!("note: {note}");
    }
    println!("{}", summary_line(&definition, &metadata));
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_synth(
    shape: &Option<String>,
    patients: Option<usize>,
    events: Option<usize>,
    seed: Option<u64>,
    rates: &[String],
    cfg: &FileConfig,
    out: &PathBuf,
) -> Result<(), Failure> {
    let shape_text = shape.clone().or_else(|| cfg.shape.clone()).unwrap_or_else(|| "appointment".into());
    let shape: SynthShape = shape_text
        .parse()
        .map_err(|_| usage(format!("unknown shape `{shape_text}` (expected appointment or hospital)")))?;
    let patients = patients.or(cfg.patients).unwrap_or(500);
    if patients == 0 {
        return Err(usage("--patients must be at least 1"));
    }
    let events = events.or(cfg.events).unwrap_or(2000);
    let seed = seed.or(cfg.seed).unwrap_or(42);
    let mut config = SynthConfig::new(shape, patients, events, seed);
    if let Some(map) = &cfg.rates {
        config.rates.extend(map.iter().map(|(k, v)| (k.clone(), *v)));
    }
    for rate in rates {
        let (key, value) = rate
            .split_once('=')
            .ok_or_else(|| usage(format!("bad --rate `{rate}` (expected KEY=VALUE)")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| usage(format!("bad --rate value in `{rate}`")))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(usage(format!("rate `{key}` must lie in [0, 1]")));
        }
        config.rates.insert(key.trim().to_owned(), value);
    }
    stage("synth", ensure_dir(out))?;
    let summary = stage("synth", ehrml::synth::generate(&config, out).map_err(anyhow::Error::from))?;
    let counts: BTreeMap<String, usize> = summary.row_counts;
    println!("generated {shape_text} data (seed {seed}) in {}", out.display());
    for (file, rows) in counts {
        println!("  {file:<16} {rows} rows");
    }
    Ok(())
}
