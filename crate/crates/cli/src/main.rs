//! `urfc` command-line interface.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use urfc::branches::GbdtBranchTrainer;
use urfc::fusion::{FusedModel, FusionConfig};
use urfc::gbdt::GbdtParams;
use urfc::ingest::{load_dataset, serialize_visit_log, DatasetIndex};
use urfc::metrics::F1Scope;
use urfc::model::CalendarWindow;
use urfc::pipeline::{
    evaluate_predictions, feature_matrix, predict_records, read_predictions, read_truth, save_predictions, train,
    Corpus, FeatureBlock, TrainConfig,
};
use urfc::seed::derive_seed;
use urfc::synth::{synth, SynthConfig};

mod config;

/// Urban region function recognition from visit logs and imagery.
#[derive(Debug, Parser)]
#[command(name = "urfc", version, args_override_self = true)]
struct Cli {
    /// Key=value file supplying defaults for long flags; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads (0 = one per core). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate every visit file; write a per-region summary.
    Ingest(IngestArgs),
    /// Export a feature block for every region.
    Features(FeaturesArgs),
    /// Train branches and the stacked fusion head.
    Train(TrainArgs),
    /// Predict region functions with a trained model.
    Predict(PredictArgs),
    /// Score predictions against labels.
    Eval(EvalArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root; manifest paths are relative to it.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Manifest CSV (default: <data>/manifest.csv).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// First day of the observation window (YYYY-MM-DD).
    #[arg(long, default_value = "2018-10-01")]
    start_date: chrono::NaiveDate,
    #[arg(long, default_value_t = 182)]
    num_days: u32,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Root seed; every random stage derives its own stream from it.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl DataArgs {
    fn manifest(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data.join("manifest.csv"))
    }

    fn check_paths(&self) -> Result<(), CliError> {
        require_dir(&self.data)?;
        require_file(&self.manifest())
    }

    fn load(&self) -> anyhow::Result<DatasetIndex> {
        let window = CalendarWindow::new(self.start_date, self.num_days)?;
        Ok(load_dataset(&self.data, &self.manifest(), window, self.folds, self.seed)?)
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Summary CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write canonicalized visit files here.
    #[arg(long)]
    canonical_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Feature block: stat, activity, graph, multi, temporal or image.
    #[arg(long, default_value = "multi")]
    only: FeatureBlock,
    /// csv or bin.
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GbdtArgs {
    #[arg(long, default_value_t = 100)]
    rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 4)]
    max_depth: usize,
    #[arg(long, default_value_t = 5)]
    min_samples_leaf: usize,
    #[arg(long, default_value_t = 1e-6)]
    min_gain: f64,
    #[arg(long, default_value_t = 1.0)]
    subsample: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    gbdt: GbdtArgs,
    /// Fail when a training split lacks a category.
    #[arg(long)]
    strict: bool,
    /// Model directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write out-of-fold probabilities as CSV.
    #[arg(long)]
    oof: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Predict every region, not only unlabeled ones.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predictions CSV written by `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Manifest-format CSV whose labeled rows are the ground truth.
    #[arg(long)]
    truth: PathBuf,
    /// present or all.
    #[arg(long, default_value = "all")]
    f1_scope: F1Scope,
    /// JSON report path (default: stdout only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    regions_per_category: usize,
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value = "2018-10-01")]
    start_date: chrono::NaiveDate,
    #[arg(long, default_value_t = 182)]
    num_days: u32,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<urfc::Error> for CliError {
    fn from(e: urfc::Error) -> Self {
        CliError::Data(e.into())
    }
}

fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", p.display())))
    }
}

fn require_dir(p: &Path) -> Result<(), CliError> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such directory: {}", p.display())))
    }
}

fn gbdt_params(args: &GbdtArgs, seed: u64) -> GbdtParams {
    GbdtParams {
        n_rounds: args.rounds,
        learning_rate: args.learning_rate,
        max_depth: args.max_depth,
        min_samples_leaf: args.min_samples_leaf,
        min_gain: args.min_gain,
        subsample: args.subsample,
        seed,
    }
}

fn run_ingest(args: &IngestArgs) -> Result<(), CliError> {
    args.data.check_paths()?;
    let dataset = args.data.load()?;
    if let Some(dir) = &args.canonical_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut summary = csv_writer(args.out.as_deref())?;
    summary.write_record(["region_id", "label", "users", "events", "active_days"]).map_err(anyhow::Error::from)?;
    for i in 0..dataset.records.len() {
        let log = dataset.load_visit_log(i)?;
        let rec = &dataset.records[i];
        let days: std::collections::BTreeSet<u32> = log.events().map(|v| v.day).collect();
        summary
            .write_record([
                rec.region_id.clone(),
                rec.label.map(|l| l.name().to_owned()).unwrap_or_default(),
                log.num_users().to_string(),
                log.num_events().to_string(),
                days.len().to_string(),
            ])
            .map_err(anyhow::Error::from)?;
        if let Some(dir) = &args.canonical_dir {
            let path = dir.join(format!("{}.txt", rec.region_id));
            fs::write(&path, serialize_visit_log(&log)).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    summary.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn csv_writer(out: Option<&Path>) -> anyhow::Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match out {
        Some(p) => {
            Box::new(io::BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn run_features(args: &FeaturesArgs) -> Result<(), CliError> {
    args.data.check_paths()?;
    if args.format != "csv" && args.format != "bin" {
        return Err(CliError::Usage(format!("unknown format {:?} (expected csv or bin)", args.format)));
    }
    let corpus = Corpus::load(args.data.load()?)?;
    let matrix = feature_matrix(&corpus, args.only)?;
    if args.format == "csv" {
        matrix.save_csv(&args.out)?;
    } else {
        matrix.save_binary(&args.out)?;
    }
    log::info!("wrote {} rows x {} features to {}", matrix.rows.len(), matrix.dims, args.out.display());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    args.data.check_paths()?;
    let seed = args.data.seed;
    let corpus = Corpus::load(args.data.load()?)?;
    let params = |stage: &str| gbdt_params(&args.gbdt, derive_seed(seed, stage));
    let config = TrainConfig {
        branches: GbdtBranchTrainer {
            image: params("branch-I"),
            temporal: params("branch-T"),
            multi: params("branch-M"),
        },
        fusion: FusionConfig { k_folds: args.data.folds, head: params("fusion"), strict: args.strict, seed },
    };
    let trained = train(&corpus, &config)?;
    trained.model.save(&args.out)?;
    if let Some(path) = &args.oof {
        let mut w = csv_writer(Some(path))?;
        let mut header = vec!["region_id".to_owned(), "label".to_owned(), "fold".to_owned()];
        header.extend((0..urfc::fusion::FUSION_DIM).map(|i| format!("p{i}")));
        w.write_record(&header).map_err(anyhow::Error::from)?;
        let folds = corpus.training_folds();
        let labels = corpus.training_labels();
        for (row, &rec) in corpus.training_records().iter().enumerate() {
            let mut r = vec![
                corpus.dataset.records[rec].region_id.clone(),
                labels[row].name().to_owned(),
                folds[row].to_string(),
            ];
            r.extend(trained.oof[row].iter().map(f64::to_string));
            w.write_record(&r).map_err(anyhow::Error::from)?;
        }
        w.flush().map_err(anyhow::Error::from)?;
    }
    log::info!("trained on {} regions; model written to {}", corpus.num_training(), args.out.display());
    Ok(())
}

fn run_predict(args: &PredictArgs) -> Result<(), CliError> {
    args.data.check_paths()?;
    require_file(&args.model.join("model.json"))?;
    let model = FusedModel::load(&args.model)?;
    let corpus = Corpus::load(args.data.load()?)?;
    let records: Vec<usize> =
        if args.all { (0..corpus.dataset.records.len()).collect() } else { corpus.dataset.unlabeled_indices() };
    let predictions = predict_records(&corpus, &model, &records)?;
    save_predictions(&args.out, &predictions)?;
    log::info!("wrote {} predictions to {}", predictions.len(), args.out.display());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    require_file(&args.predictions)?;
    require_file(&args.truth)?;
    let predictions = read_predictions(&args.predictions)?;
    let truth = read_truth(&args.truth)?;
    let report = evaluate_predictions(&predictions, &truth, args.f1_scope)?;
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
        fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        regions_per_category: args.regions_per_category,
        n_users: args.users,
        window: CalendarWindow::new(args.start_date, args.num_days)?,
        noise: args.noise,
        seed: args.seed,
        test_fraction: args.test_fraction,
        ..SynthConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = synth(&config, &args.out)?;
    log::info!("wrote {} regions ({} held out) to {}", out.n_regions, out.n_test, out.root.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest(a) => run_ingest(a),
        Command::Features(a) => run_features(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config::apply_config_file(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {}", anyhow!(e));
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
