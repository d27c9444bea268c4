//! Experiment grids over pre-training noise, downstream noise, tuning modes,
//! tasks, data fractions and seeds.

mod aggregate;
mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::io::{self, fetch_embeddings, read_fmat, read_labels, IoError, ProviderError};
use crate::linalg::Matrix;
use crate::nn::{self, EpochStats, FeatureSource, Mode, NnError};
use crate::sim::{
    self, make_downstream, pretrain, stratified_indices, DownstreamTask, SimError, TaskKind,
    ToyExtractor,
};
use crate::spectrum::{analyze, AnalyzeOptions};

pub use aggregate::{aggregate, kind_table, series_csv, KindRow, Stat, Summary, SummaryRow};
pub use config::{ExperimentPlan, NoiseTemplate, RunConfigFile, SourceConfig, TaskSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("failed to build a worker pool: {0}")]
    Pool(String),
}

/// One evaluated cell: a tuned model scored on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalResult {
    pub cell_id: String,
    pub plan: String,
    pub task_id: String,
    pub task_kind: TaskKind,
    pub mode: Mode,
    pub gamma: f64,
    pub eta: f64,
    pub fraction: f64,
    pub seed: u64,
    /// Seed of the tuning run (head init and shuffles).
    pub cell_seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Spectrum of the tuned feature space `Z` on the test split; 0 when `Z`
    /// is identically zero.
    pub sve: f64,
    pub lsvr: f64,
    pub train_accuracy: f64,
    /// Clean validation accuracy of the simulated pre-training classifier.
    pub pretrain_clean_accuracy: Option<f64>,
    pub extractor_delta_norm: Option<f64>,
    pub loss_trace: Vec<EpochStats>,
}

/// A cell that could not be evaluated. The rest of the grid still runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellFailure {
    pub cell_id: String,
    pub task_id: String,
    pub mode: Mode,
    pub gamma: f64,
    pub eta: f64,
    pub fraction: f64,
    pub seed: u64,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    pub plan: ExperimentPlan,
    pub hash: String,
    pub results: Vec<EvalResult>,
    pub failures: Vec<CellFailure>,
    /// Test-split `Z` per cell id, when the plan asks for them.
    pub features: BTreeMap<String, Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub config: RunConfigFile,
    pub plans: Vec<PlanOutput>,
}

pub fn cell_id(task: &str, mode: Mode, gamma: f64, eta: f64, fraction: f64, seed: u64) -> String {
    format!("{task}_{mode}_g{gamma}_e{eta}_f{fraction}_s{seed}")
}

/// `u64` from the first 8 bytes of SHA-256 over the `/`-joined parts.
/// Floats enter through their shortest round-trip decimal form.
pub fn derive_seed(parts: &[&dyn std::fmt::Display]) -> u64 {
    let mut text = String::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            text.push('/');
        }
        write!(text, "{p}").expect("string write");
    }
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Seed of a tuning run. It leaves out γ, the mode and the task, so every
/// extractor, every head and every evaluated task within a (replicate, η,
/// fraction) slice sees the same initialization and batch order.
pub fn cell_seed(plan_seed: u64, seed: u64, eta: f64, fraction: f64) -> u64 {
    derive_seed(&[&"cell", &plan_seed, &seed, &eta, &fraction])
}

/// Runs every plan of `cfg`. Simulated extractors are shared across plans.
pub fn run_sweep(cfg: &RunConfigFile) -> Result<SweepOutput, HarnessError> {
    let cfg = cfg.materialized()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let plans = pool.install(|| {
        let materials = build_materials(&cfg);
        cfg.plans
            .iter()
            .map(|plan| execute_plan(&cfg, plan, &materials))
            .collect::<Vec<_>>()
    });
    Ok(SweepOutput { config: cfg, plans })
}

/// Runs a single plan against the sources and settings of `cfg`.
pub fn run_plan(cfg: &RunConfigFile, plan: &ExperimentPlan) -> Result<PlanOutput, HarnessError> {
    let single = RunConfigFile {
        plans: vec![plan.clone()],
        ..cfg.clone()
    };
    Ok(run_sweep(&single)?.plans.remove(0))
}

/// Writes `<out>/config.json` and, per plan, `<out>/<plan-hash>/` holding
/// `plan.json`, `failures.json` and one `<cell-id>.json` per result.
pub fn write_sweep(out: &Path, sweep: &SweepOutput) -> Result<Vec<PathBuf>, HarnessError> {
    io::write_json(&sweep.config, &out.join("config.json"))?;
    let mut dirs = Vec::new();
    for p in &sweep.plans {
        let dir = out.join(&p.hash);
        io::write_json(&p.plan, &dir.join("plan.json"))?;
        io::write_json(&p.failures, &dir.join("failures.json"))?;
        for r in &p.results {
            io::write_json(r, &dir.join(format!("{}.json", r.cell_id)))?;
        }
        for (id, z) in &p.features {
            io::write_fmat(z, &dir.join(format!("{id}.z.fmat")))?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Reads every `<cell-id>.json` result below `dir` (recursively).
pub fn read_results(dir: &Path) -> Result<Vec<EvalResult>, HarnessError> {
    let mut files = Vec::new();
    collect_json(dir, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if matches!(name, "config.json" | "plan.json" | "failures.json")
            || name.starts_with("summary")
        {
            continue;
        }
        out.push(io::read_json(&f)?);
    }
    sort_results(&mut out);
    Ok(out)
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let entries = std::fs::read_dir(dir).map_err(|e| {
        HarnessError::Io(IoError::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })?;
    for entry in entries {
        let path = entry
            .map_err(|e| {
                HarnessError::Io(IoError::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })
            })?
            .path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}

pub fn sort_results(results: &mut [EvalResult]) {
    results.sort_by(|a, b| {
        (&a.plan, &a.task_id, a.mode as u8)
            .cmp(&(&b.plan, &b.task_id, b.mode as u8))
            .then(a.gamma.total_cmp(&b.gamma))
            .then(a.eta.total_cmp(&b.eta))
            .then(a.fraction.total_cmp(&b.fraction))
            .then(a.seed.cmp(&b.seed))
    });
}

// ---------------------------------------------------------------------------
// Materials: everything a tuning run needs for one (seed, gamma, task group).

/// A test split as seen by the evaluator.
struct TestSplit {
    task_id: String,
    kind: TaskKind,
    features: Arc<Matrix>,
    inputs: Option<Arc<Matrix>>,
    labels: Arc<Vec<usize>>,
}

struct Material {
    train_features: Arc<Matrix>,
    /// Raw inputs and extractor, simulator only.
    extractor: Option<(Arc<ToyExtractor>, Arc<Matrix>)>,
    train_labels: Arc<Vec<usize>>,
    num_classes: usize,
    tests: Vec<TestSplit>,
    pretrain_clean_accuracy: Option<f64>,
    /// Corrupted count and noisy-label train accuracy of the pre-training run.
    pretrain: Option<(usize, f64)>,
}

type Failure = (String, String);

/// Key: seed, gamma bits, task group.
type MaterialKey = (u64, u64, String);
type Materials = BTreeMap<MaterialKey, Result<Arc<Material>, Failure>>;

fn failure_of(kind: &str, e: impl std::fmt::Display) -> Failure {
    (kind.to_string(), e.to_string())
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Nn(NnError::TrainingDiverged { .. }) => failure_of("numeric", e),
        _ => failure_of("simulator", e),
    }
}

/// Task groups share training data. In the simulator every task is trained
/// on the same source split, so all tasks form one group.
fn task_groups(cfg: &RunConfigFile, plan: &ExperimentPlan) -> Vec<(String, Vec<String>)> {
    match cfg.source {
        SourceConfig::Simulator => vec![(plan.tasks.join("+"), plan.tasks.clone())],
        _ => plan.tasks.iter().map(|t| (t.clone(), vec![t.clone()])).collect(),
    }
}

fn build_materials(cfg: &RunConfigFile) -> Materials {
    let mut keys: Vec<(u64, f64, String, Vec<String>)> = Vec::new();
    for plan in &cfg.plans {
        for (group, tasks) in task_groups(cfg, plan) {
            for &s in &plan.seeds {
                for &g in &plan.gamma_list {
                    if !keys
                        .iter()
                        .any(|k| k.0 == s && k.1.to_bits() == g.to_bits() && k.2 == group)
                    {
                        keys.push((s, g, group.clone(), tasks.clone()));
                    }
                }
            }
        }
    }
    match &cfg.source {
        SourceConfig::Simulator => simulator_materials(cfg, &keys),
        SourceConfig::Features { root } => keys
            .par_iter()
            .map(|(s, g, group, tasks)| {
                let m = file_material(cfg, root, *s, *g, tasks).map(Arc::new);
                ((*s, g.to_bits(), group.clone()), m)
            })
            .collect(),
        SourceConfig::Provider { provider, root } => {
            // Embeddings do not depend on the replicate; fetch once per
            // (gamma, group) and share.
            let mut fetched: BTreeMap<(u64, String), Result<Arc<Material>, Failure>> =
                BTreeMap::new();
            let mut out = Materials::new();
            for (s, g, group, tasks) in &keys {
                let entry = fetched
                    .entry((g.to_bits(), group.clone()))
                    .or_insert_with(|| {
                        provider_material(cfg, provider, root, *g, tasks).map(Arc::new)
                    })
                    .clone();
                out.insert((*s, g.to_bits(), group.clone()), entry);
            }
            out
        }
    }
}

struct Replicate {
    data: sim::PretrainData,
    tasks: Vec<DownstreamTask>,
}

fn simulator_materials(cfg: &RunConfigFile, keys: &[(u64, f64, String, Vec<String>)]) -> Materials {
    let base = cfg.synthetic.seed;
    let mut seeds: Vec<u64> = keys.iter().map(|k| k.0).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let replicates: BTreeMap<u64, Result<Arc<Replicate>, Failure>> = seeds
        .par_iter()
        .map(|&s| (s, simulate_replicate(cfg, base, s).map(Arc::new)))
        .collect();

    let mut pairs: Vec<(u64, f64)> = keys.iter().map(|k| (k.0, k.1)).collect();
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pairs.dedup_by(|a, b| a.0 == b.0 && a.1.to_bits() == b.1.to_bits());
    let pretrained: BTreeMap<(u64, u64), Result<Arc<sim::Pretrained>, Failure>> = pairs
        .par_iter()
        .map(|&(s, g)| {
            let r = match &replicates[&s] {
                Ok(rep) => {
                    let noise = cfg
                        .pretrain_noise
                        .spec(g, derive_seed(&[&"pretrain-noise", &base, &s]));
                    pretrain(&rep.data, &noise, &cfg.pretrain, derive_seed(&[&"pretrain", &base, &s]))
                        .map(Arc::new)
                        .map_err(sim_failure)
                }
                Err(f) => Err(f.clone()),
            };
            ((s, g.to_bits()), r)
        })
        .collect();

    keys.par_iter()
        .map(|(s, g, group, tasks)| {
            let key = (*s, g.to_bits(), group.clone());
            let m = match (&replicates[s], &pretrained[&(*s, g.to_bits())]) {
                (Ok(rep), Ok(pre)) => simulator_material(cfg, rep, pre, tasks).map(Arc::new),
                (Err(f), _) | (_, Err(f)) => Err(f.clone()),
            };
            (key, m)
        })
        .collect()
}

fn simulate_replicate(cfg: &RunConfigFile, base: u64, s: u64) -> Result<Replicate, Failure> {
    let spec = sim::SyntheticSpec {
        seed: derive_seed(&[&"data", &base, &s]),
        ..cfg.synthetic.clone()
    };
    let data = sim::generate(&spec).map_err(sim_failure)?;
    let task_seed = derive_seed(&[&"downstream", &base, &s]);
    let tasks = cfg
        .tasks
        .iter()
        .map(|t| make_downstream(&data.generator, &cfg.downstream, t.kind, t.shift, task_seed))
        .collect::<Result<Vec<_>, _>>()
        .map_err(sim_failure)?;
    Ok(Replicate { data, tasks })
}

fn simulator_material(
    cfg: &RunConfigFile,
    rep: &Replicate,
    pre: &sim::Pretrained,
    tasks: &[String],
) -> Result<Material, Failure> {
    let extractor = &pre.extractor;
    let nn_fail = |e: NnError| failure_of("numeric", e);
    let mut tests = Vec::new();
    let mut source_train = None;
    for id in tasks {
        let i = cfg
            .tasks
            .iter()
            .position(|t| &t.id == id)
            .ok_or_else(|| failure_of("config", format!("unknown task {id:?}")))?;
        let task = &rep.tasks[i];
        source_train.get_or_insert(&task.train);
        let inputs = Arc::new(task.test.inputs.clone());
        tests.push(TestSplit {
            task_id: id.clone(),
            kind: task.kind,
            features: Arc::new(extractor.extract(&inputs).map_err(nn_fail)?),
            inputs: Some(inputs),
            labels: Arc::new(task.test.labels.clone()),
        });
    }
    let train = source_train.ok_or_else(|| failure_of("config", "plan has no tasks"))?;
    let train_inputs = Arc::new(train.inputs.clone());
    Ok(Material {
        train_features: Arc::new(extractor.extract(&train_inputs).map_err(nn_fail)?),
        extractor: Some((Arc::new(extractor.clone()), train_inputs)),
        train_labels: Arc::new(train.labels.clone()),
        num_classes: train.num_classes,
        tests,
        pretrain_clean_accuracy: Some(pre.clean_validation_accuracy),
        pretrain: Some((pre.corrupted, pre.noisy_train_accuracy)),
    })
}

/// `<root>/seed=<s>/gamma=<g>/<task>/` if present, else `<root>/gamma=<g>/<task>/`.
pub fn task_dir(root: &Path, seed: u64, gamma: f64, task: &str) -> PathBuf {
    let seeded = root
        .join(format!("seed={seed}"))
        .join(format!("gamma={gamma}"))
        .join(task);
    if seeded.is_dir() {
        seeded
    } else {
        root.join(format!("gamma={gamma}")).join(task)
    }
}

fn io_failure(e: IoError) -> Failure {
    match e {
        IoError::MissingArtifact(_) => failure_of("missing_artifact", e),
        _ => failure_of("data", e),
    }
}

fn load_split(dir: &Path, split: &str) -> Result<(Matrix, io::LabelFile), Failure> {
    let x = read_fmat(&dir.join(format!("{split}.fmat"))).map_err(io_failure)?;
    let y = read_labels(&dir.join(format!("{split}.labels"))).map_err(io_failure)?;
    if x.rows() != y.labels.len() {
        return Err(failure_of(
            "data",
            format!(
                "{}: {} feature rows for {} labels",
                dir.join(split).display(),
                x.rows(),
                y.labels.len()
            ),
        ));
    }
    Ok((x, y))
}

fn task_kind_of(cfg: &RunConfigFile, id: &str) -> TaskKind {
    cfg.tasks
        .iter()
        .find(|t| t.id == id)
        .map_or(TaskKind::Id, |t| t.kind)
}

fn file_material(
    cfg: &RunConfigFile,
    root: &Path,
    seed: u64,
    gamma: f64,
    tasks: &[String],
) -> Result<Material, Failure> {
    let id = &tasks[0];
    let dir = task_dir(root, seed, gamma, id);
    let (xtr, ytr) = load_split(&dir, "train")?;
    let (xte, yte) = load_split(&dir, "test")?;
    assemble(cfg, id, xtr, ytr, xte, yte)
}

fn assemble(
    cfg: &RunConfigFile,
    id: &str,
    xtr: Matrix,
    ytr: io::LabelFile,
    xte: Matrix,
    yte: io::LabelFile,
) -> Result<Material, Failure> {
    if xtr.cols() != xte.cols() {
        return Err(failure_of(
            "data",
            format!("train dim {} != test dim {}", xtr.cols(), xte.cols()),
        ));
    }
    let num_classes = ytr.num_classes().max(yte.num_classes());
    Ok(Material {
        train_features: Arc::new(xtr),
        extractor: None,
        train_labels: Arc::new(ytr.labels),
        num_classes,
        tests: vec![TestSplit {
            task_id: id.to_string(),
            kind: task_kind_of(cfg, id),
            features: Arc::new(xte),
            inputs: None,
            labels: Arc::new(yte.labels),
        }],
        pretrain_clean_accuracy: None,
        pretrain: None,
    })
}

fn read_inputs(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        io_failure(if e.kind() == std::io::ErrorKind::NotFound {
            IoError::MissingArtifact(path.to_path_buf())
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        })
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn provider_failure(e: ProviderError) -> Failure {
    failure_of("provider", e)
}

/// Inputs come from `<root>/gamma=<g>/<task>/{train,test}.txt` (one per
/// line) with matching `.labels` files; `{gamma}` in the endpoint is
/// replaced by the noise ratio.
fn provider_material(
    cfg: &RunConfigFile,
    provider: &io::ProviderConfig,
    root: &Path,
    gamma: f64,
    tasks: &[String],
) -> Result<Material, Failure> {
    let id = &tasks[0];
    let dir = root.join(format!("gamma={gamma}")).join(id);
    let pcfg = io::ProviderConfig {
        endpoint: provider.endpoint.replace("{gamma}", &gamma.to_string()),
        ..provider.clone()
    };
    let mut splits = Vec::new();
    for split in ["train", "test"] {
        let inputs = read_inputs(&dir.join(format!("{split}.txt")))?;
        let labels = read_labels(&dir.join(format!("{split}.labels"))).map_err(io_failure)?;
        if inputs.len() != labels.labels.len() {
            return Err(failure_of(
                "data",
                format!("{split}: {} inputs for {} labels", inputs.len(), labels.labels.len()),
            ));
        }
        let (x, _) = fetch_embeddings(&pcfg, &inputs).map_err(provider_failure)?;
        splits.push((x, labels));
    }
    let (xte, yte) = splits.pop().expect("two splits");
    let (xtr, ytr) = splits.pop().expect("two splits");
    assemble(cfg, id, xtr, ytr, xte, yte)
}

// ---------------------------------------------------------------------------
// Cells.

struct Unit<'a> {
    seed: u64,
    gamma: f64,
    eta: f64,
    mode: Mode,
    fraction: f64,
    group: &'a str,
    tasks: &'a [String],
}

type UnitOutput = Vec<Result<(EvalResult, Option<Matrix>), CellFailure>>;

fn execute_plan(cfg: &RunConfigFile, plan: &ExperimentPlan, materials: &Materials) -> PlanOutput {
    let groups = task_groups(cfg, plan);
    let mut units = Vec::new();
    for (group, tasks) in &groups {
        for &seed in &plan.seeds {
            for &gamma in &plan.gamma_list {
                for &eta in &plan.eta_list {
                    for &mode in &plan.modes {
                        for &fraction in &plan.data_fractions {
                            units.push(Unit {
                                seed,
                                gamma,
                                eta,
                                mode,
                                fraction,
                                group,
                                tasks,
                            });
                        }
                    }
                }
            }
        }
    }
    let outputs: Vec<UnitOutput> = units
        .par_iter()
        .map(|u| run_unit(cfg, plan, u, materials))
        .collect();

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut features = BTreeMap::new();
    for out in outputs.into_iter().flatten() {
        match out {
            Ok((r, z)) => {
                if let Some(z) = z {
                    features.insert(r.cell_id.clone(), z);
                }
                results.push(r);
            }
            Err(f) => failures.push(f),
        }
    }
    sort_results(&mut results);
    failures.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
    PlanOutput {
        hash: cfg.plan_hash(plan),
        plan: plan.clone(),
        results,
        failures,
        features,
    }
}

fn run_unit(
    cfg: &RunConfigFile,
    plan: &ExperimentPlan,
    u: &Unit,
    materials: &Materials,
) -> UnitOutput {
    let fail_all = |(kind, message): Failure| -> UnitOutput {
        u.tasks
            .iter()
            .map(|t| {
                Err(CellFailure {
                    cell_id: cell_id(t, u.mode, u.gamma, u.eta, u.fraction, u.seed),
                    task_id: t.clone(),
                    mode: u.mode,
                    gamma: u.gamma,
                    eta: u.eta,
                    fraction: u.fraction,
                    seed: u.seed,
                    kind: kind.clone(),
                    message: message.clone(),
                })
            })
            .collect()
    };
    let key = (u.seed, u.gamma.to_bits(), u.group.to_string());
    let material = match materials.get(&key) {
        Some(Ok(m)) => m,
        Some(Err(f)) => return fail_all(f.clone()),
        None => return fail_all(failure_of("internal", "material was not prepared")),
    };
    match tune_and_evaluate(cfg, plan, u, material) {
        Ok(v) => v.into_iter().map(Ok).collect(),
        Err(f) => fail_all(f),
    }
}

fn nn_failure(e: NnError) -> Failure {
    match e {
        NnError::TrainingDiverged { .. } | NnError::Loss(_) | NnError::Linalg(_) | NnError::Spectrum(_) => {
            failure_of("numeric", e)
        }
        NnError::Config(_) => failure_of("config", e),
        _ => failure_of("data", e),
    }
}

fn tune_and_evaluate(
    cfg: &RunConfigFile,
    plan: &ExperimentPlan,
    u: &Unit,
    m: &Material,
) -> Result<Vec<(EvalResult, Option<Matrix>)>, Failure> {
    let keep = stratified_indices(&m.train_labels, m.num_classes, u.fraction);
    let clean: Vec<usize> = keep.iter().map(|&i| m.train_labels[i]).collect();
    let noise = cfg.downstream_noise.spec(
        u.eta,
        derive_seed(&[&"downstream-noise", &plan.plan_seed, &u.seed, &u.fraction]),
    );
    let labels = noise
        .apply(&clean, m.num_classes)
        .map_err(|e| failure_of("config", e))?
        .labels;
    let cell_seed = cell_seed(plan.plan_seed, u.seed, u.eta, u.fraction);
    let tcfg = cfg
        .train_config(u.mode)
        .ok_or_else(|| failure_of("config", format!("no training config for {}", u.mode)))?
        .clone()
        .with_seed(cell_seed);

    let train_x;
    let train_inputs;
    let source = if u.mode.needs_extractor() {
        let (ext, inputs) = m.extractor.as_ref().ok_or_else(|| {
            failure_of(
                "config",
                format!("{} needs the simulator extractor, not precomputed features", u.mode),
            )
        })?;
        train_inputs = inputs.select_rows(&keep);
        FeatureSource::Extractor {
            extractor: ext,
            inputs: &train_inputs,
        }
    } else {
        train_x = m.train_features.select_rows(&keep);
        FeatureSource::Features(&train_x)
    };
    let (model, trace) = nn::train(&source, &labels, m.num_classes, &tcfg).map_err(nn_failure)?;

    let mut out = Vec::with_capacity(m.tests.len());
    for t in &m.tests {
        let src = match (&m.extractor, &t.inputs) {
            (Some((ext, _)), Some(inputs)) if u.mode.needs_extractor() => FeatureSource::Extractor {
                extractor: ext,
                inputs,
            },
            _ => FeatureSource::Features(&t.features),
        };
        let id = cell_id(&t.task_id, u.mode, u.gamma, u.eta, u.fraction, u.seed);
        let (z, logits) = model.forward(&src).map_err(nn_failure)?;
        let eval = nn::evaluate_outputs(&z, &logits, &t.labels, &t.task_id, u.mode.as_str())
            .map_err(nn_failure)?;
        let (sve, lsvr) = eval.spectrum.as_ref().map_or((0.0, 0.0), |s| (s.sve, s.lsvr));
        out.push((
            EvalResult {
                cell_id: id,
                plan: plan.name.clone(),
                task_id: t.task_id.clone(),
                task_kind: t.kind,
                mode: u.mode,
                gamma: u.gamma,
                eta: u.eta,
                fraction: u.fraction,
                seed: u.seed,
                cell_seed,
                train_size: trace.train_size,
                test_size: t.labels.len(),
                accuracy: eval.metrics.accuracy,
                macro_f1: eval.metrics.macro_f1,
                sve,
                lsvr,
                train_accuracy: trace.train_accuracy,
                pretrain_clean_accuracy: m.pretrain_clean_accuracy,
                extractor_delta_norm: trace.extractor_delta_norm,
                loss_trace: trace.epochs.clone(),
            },
            plan.persist_features.then_some(z),
        ));
    }
    Ok(out)
}

/// SVE and LSVR recomputed from a persisted feature matrix, as recorded in
/// [`EvalResult`].
pub fn spectrum_of(z: &Matrix) -> (f64, f64) {
    match analyze(z, "", "", AnalyzeOptions::default()) {
        Ok(r) => (r.sve, r.lsvr),
        Err(_) => (0.0, 0.0),
    }
}

/// Summary of one simulated pre-training run, written next to its features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub seed: u64,
    pub gamma: f64,
    pub corrupted: usize,
    pub noisy_train_accuracy: f64,
    pub clean_validation_accuracy: f64,
}

/// Simulates every (seed, gamma) pair and writes frozen features and labels
/// in the layout read by [`SourceConfig::Features`]:
/// `<out>/seed=<s>/gamma=<g>/<task>/{train,test}.{fmat,labels}` plus
/// `<out>/seed=<s>/gamma=<g>/pretrain.json`.
pub fn export_simulation(
    cfg: &RunConfigFile,
    seeds: &[u64],
    gammas: &[f64],
    out: &Path,
) -> Result<Vec<PretrainRecord>, HarnessError> {
    let cfg = cfg.materialized()?;
    let ids: Vec<String> = cfg.tasks.iter().map(|t| t.id.clone()).collect();
    let keys: Vec<(u64, f64, String, Vec<String>)> = seeds
        .iter()
        .flat_map(|&s| gammas.iter().map(move |&g| (s, g)))
        .map(|(s, g)| (s, g, ids.join("+"), ids.clone()))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let materials = pool.install(|| simulator_materials(&cfg, &keys));
    let mut records = Vec::new();
    for (s, g, group, _) in &keys {
        let m = match &materials[&(*s, g.to_bits(), group.clone())] {
            Ok(m) => m,
            Err((kind, message)) => {
                return Err(HarnessError::Config(format!(
                    "simulation failed for seed {s}, gamma {g} ({kind}): {message}"
                )))
            }
        };
        let dir = out.join(format!("seed={s}")).join(format!("gamma={g}"));
        let labels = |l: &[usize]| io::LabelFile {
            labels: l.to_vec(),
            classes: Some(m.num_classes),
        };
        for t in &m.tests {
            let tdir = dir.join(&t.task_id);
            io::write_fmat(&m.train_features, &tdir.join("train.fmat"))?;
            io::write_labels(&labels(&m.train_labels), &tdir.join("train.labels"))?;
            io::write_fmat(&t.features, &tdir.join("test.fmat"))?;
            io::write_labels(&labels(&t.labels), &tdir.join("test.labels"))?;
        }
        let pre = pretrain_record(*s, *g, m);
        io::write_json(&pre, &dir.join("pretrain.json"))?;
        records.push(pre);
    }
    Ok(records)
}

fn pretrain_record(s: u64, g: f64, m: &Material) -> PretrainRecord {
    let (corrupted, noisy_train_accuracy) = m.pretrain.expect("simulated material");
    PretrainRecord {
        seed: s,
        gamma: g,
        corrupted,
        noisy_train_accuracy,
        clean_validation_accuracy: m.pretrain_clean_accuracy.expect("simulated material"),
    }
}
