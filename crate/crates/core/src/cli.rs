//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Errors go to stderr as one JSON object per line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::harness::{self, EvalResult, HarnessError, RunConfigFile};
use crate::io::{self, IoError, LabelFile};
use crate::linalg::LinalgError;
use crate::nn::{self, FeatureSource, Mode, NnError, TrainConfig};
use crate::noise::{NoiseError, NoiseKind, NoiseSpec};
use crate::sim::{SimError, TaskKind};
use crate::spectrum::{analyze, AnalyzeOptions, SpectrumError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "nmtune", version, about = "Feature-spectrum diagnostics and noise-robust tuning")]
struct Cli {
    /// Base seed (noise draws, tuning, simulator).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Spectrum report (SVE, LSVR, top singular values) of a feature matrix.
    Analyze(AnalyzeArgs),
    /// Corrupt a label file.
    InjectNoise(NoiseArgs),
    /// Pre-train simulated extractors and write frozen features per gamma.
    Simulate(SimulateArgs),
    /// Train one head on a feature matrix and evaluate it.
    Tune(TuneArgs),
    /// Run every plan of a configuration file into a results directory.
    Sweep(SweepArgs),
    /// Summary tables and plot-ready series from a results directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    features: PathBuf,
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    /// Subtract column means first.
    #[arg(long)]
    center: bool,
    #[arg(long, default_value = "")]
    dataset_id: String,
    #[arg(long, default_value = "")]
    model_id: String,
}

#[derive(Debug, Args)]
struct NoiseArgs {
    labels: PathBuf,
    #[arg(long)]
    gamma: f64,
    #[arg(long, value_enum, default_value = "symmetric")]
    kind: KindArg,
    /// Comma-separated class ids eligible for asymmetric noise.
    #[arg(long, value_delimiter = ',')]
    subset: Vec<usize>,
    /// Class count when the file has no header.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum KindArg {
    Symmetric,
    Asymmetric,
    PairSwap,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    eval_features: Option<PathBuf>,
    #[arg(long)]
    eval_labels: Option<PathBuf>,
    #[arg(long, default_value = "LP")]
    mode: Mode,
    /// Training configuration JSON; overrides `--mode`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "cli")]
    task_id: String,
    /// Recorded in the result.
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    results: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn record(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Data(m) => ("data", m),
            CliError::Numeric(m) => ("numeric", m),
        };
        serde_json::json!({"error": kind, "code": self.code(), "message": message}).to_string()
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Shape(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SpectrumError> for CliError {
    fn from(e: SpectrumError) -> Self {
        match e {
            SpectrumError::Linalg(l) => l.into(),
            SpectrumError::ZeroSpectrum => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<NoiseError> for CliError {
    fn from(e: NoiseError) -> Self {
        match e {
            NoiseError::BadRatio(_) | NoiseError::CannotFlip(_) => CliError::Usage(e.to_string()),
            NoiseError::Label { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Config(_) => CliError::Usage(e.to_string()),
            NnError::Label { .. } | NnError::Shape(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Nn(n) => n.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(stderr, "{}", CliError::Usage(first.to_string()).record());
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.record());
            e.code()
        }
    }
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(cli, a, stdout),
        Command::InjectNoise(a) => cmd_inject(cli, a, stdout),
        Command::Simulate(a) => cmd_simulate(cli, a, stdout),
        Command::Tune(a) => cmd_tune(cli, a, stdout),
        Command::Sweep(a) => cmd_sweep(cli, a, stdout, stderr),
        Command::Report(a) => cmd_report(cli, a, stdout),
    }
}

fn require_out(cli: &Cli, what: &str) -> Result<PathBuf, CliError> {
    cli.out
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{what} needs --out")))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("output")
        .to_string()
}

fn emit(stdout: &mut dyn Write, bytes: &[u8]) -> Result<(), CliError> {
    stdout
        .write_all(bytes)
        .map_err(|e| CliError::Data(format!("stdout: {e}")))
}

fn cmd_analyze(cli: &Cli, a: &AnalyzeArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let f = io::read_fmat(&a.features)?;
    let opts = AnalyzeOptions {
        top_k: a.top_k,
        center: a.center,
    };
    let report = analyze(&f, &a.dataset_id, &a.model_id, opts)?;
    let bytes = io::to_json_bytes(&report);
    match &cli.out {
        Some(dir) => {
            let path = dir.join(format!("{}.spectrum.json", stem(&a.features)));
            io::write_atomic(&path, &bytes)?;
            emit(stdout, format!("{}\n", path.display()).as_bytes())
        }
        None => emit(stdout, &bytes),
    }
}

fn cmd_inject(cli: &Cli, a: &NoiseArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let file = io::read_labels(&a.labels)?;
    let classes = a.classes.or(file.classes).unwrap_or_else(|| file.num_classes());
    let kind = match a.kind {
        KindArg::Symmetric => NoiseKind::Symmetric,
        KindArg::Asymmetric => NoiseKind::Asymmetric,
        KindArg::PairSwap => NoiseKind::PairSwap,
    };
    let spec = NoiseSpec {
        kind,
        ratio: a.gamma,
        subset: (!a.subset.is_empty()).then(|| a.subset.clone()),
        seed: cli.seed.unwrap_or(0),
    };
    let corrupted = spec.apply(&file.labels, classes)?;
    let out = LabelFile {
        labels: corrupted.labels,
        classes: file.classes,
    };
    match &cli.out {
        Some(dir) => {
            let path = dir.join(format!("{}.noisy.labels", stem(&a.labels)));
            io::write_labels(&out, &path)?;
            emit(stdout, format!("{}\n", path.display()).as_bytes())
        }
        None => emit(stdout, out.render().as_bytes()),
    }
}

fn load_config(cli: &Cli, path: Option<&Path>) -> Result<RunConfigFile, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(s) = cli.seed {
        cfg.synthetic.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let out = require_out(cli, "simulate")?;
    let cfg = load_config(cli, a.config.as_deref())?;
    let plan = cfg.plans.first().cloned().unwrap_or_default();
    let gammas = if a.gammas.is_empty() {
        plan.gamma_list
    } else {
        a.gammas.clone()
    };
    let seeds = if a.seeds.is_empty() {
        plan.seeds
    } else {
        a.seeds.clone()
    };
    let records = harness::export_simulation(&cfg, &seeds, &gammas, &out)?;
    emit(stdout, &io::to_json_bytes(&records))
}

fn cmd_tune(cli: &Cli, a: &TuneArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let out = require_out(cli, "tune")?;
    let x = io::read_fmat(&a.features)?;
    let y = io::read_labels(&a.labels)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::for_mode(a.mode),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let (ex, ey) = match (&a.eval_features, &a.eval_labels) {
        (Some(f), Some(l)) => (io::read_fmat(f)?, io::read_labels(l)?),
        (None, None) => (x.clone(), y.clone()),
        _ => {
            return Err(CliError::Usage(
                "--eval-features and --eval-labels go together".into(),
            ))
        }
    };
    let classes = y.num_classes().max(ey.num_classes());
    let (model, trace) = nn::train(&FeatureSource::Features(&x), &y.labels, classes, &cfg)?;
    let (z, logits) = model.forward(&FeatureSource::Features(&ex))?;
    let eval = nn::evaluate_outputs(&z, &logits, &ey.labels, &a.task_id, cfg.mode.as_str())?;
    let (sve, lsvr) = eval.spectrum.as_ref().map_or((0.0, 0.0), |s| (s.sve, s.lsvr));
    let result = EvalResult {
        cell_id: harness::cell_id(&a.task_id, cfg.mode, a.gamma, a.eta, 1.0, cfg.seed),
        plan: "cli".into(),
        task_id: a.task_id.clone(),
        task_kind: TaskKind::Id,
        mode: cfg.mode,
        gamma: a.gamma,
        eta: a.eta,
        fraction: 1.0,
        seed: cfg.seed,
        cell_seed: cfg.seed,
        train_size: trace.train_size,
        test_size: ey.labels.len(),
        accuracy: eval.metrics.accuracy,
        macro_f1: eval.metrics.macro_f1,
        sve,
        lsvr,
        train_accuracy: trace.train_accuracy,
        pretrain_clean_accuracy: None,
        extractor_delta_norm: trace.extractor_delta_norm,
        loss_trace: trace.epochs,
    };
    io::write_json(&result, &out.join("eval_result.json"))?;
    io::write_json(&model, &out.join("head.json"))?;
    emit(stdout, &io::to_json_bytes(&result))
}

fn cmd_sweep(
    cli: &Cli,
    a: &SweepArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let out = require_out(cli, "sweep")?;
    let cfg = load_config(cli, Some(&a.config))?;
    let sweep = harness::run_sweep(&cfg)?;
    let dirs = harness::write_sweep(&out, &sweep)?;
    for (p, dir) in sweep.plans.iter().zip(&dirs) {
        emit(
            stdout,
            format!(
                "plan={} hash={} results={} failures={} dir={}\n",
                p.plan.name,
                p.hash,
                p.results.len(),
                p.failures.len(),
                dir.display()
            )
            .as_bytes(),
        )?;
        for f in &p.failures {
            let rec = serde_json::json!({
                "warning": "cell_failed",
                "cell_id": f.cell_id,
                "kind": f.kind,
                "message": f.message,
            });
            let _ = writeln!(stderr, "{rec}");
        }
    }
    Ok(())
}

fn cmd_report(cli: &Cli, a: &ReportArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let results = harness::read_results(&a.results)?;
    if results.is_empty() {
        return Err(CliError::Data(format!(
            "no results under {}",
            a.results.display()
        )));
    }
    let summary = harness::aggregate(&results);
    let out = cli.out.clone().unwrap_or_else(|| a.results.clone());
    io::write_json(&summary, &out.join("summary.json"))?;
    io::write_atomic(&out.join("summary.csv"), harness::series_csv(&summary).as_bytes())?;
    let table = harness::kind_table(&summary);
    io::write_atomic(&out.join("summary.txt"), table.as_bytes())?;
    emit(stdout, table.as_bytes())
}
