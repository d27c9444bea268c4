use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::io::ProviderConfig;
use crate::loss::NmTuneConfig;
use crate::nn::{Mode, TrainConfig};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::sim::{DownstreamSpec, PretrainConfig, ShiftParams, SyntheticSpec, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    /// Applied to the test split of OOD tasks.
    #[serde(default)]
    pub shift: ShiftParams,
}

/// Noise settings without ratio and seed, which the harness fills in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseTemplate {
    pub kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<usize>>,
}

impl Default for NoiseTemplate {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            subset: None,
        }
    }
}

impl NoiseTemplate {
    pub fn spec(&self, ratio: f64, seed: u64) -> NoiseSpec {
        NoiseSpec {
            kind: self.kind,
            ratio,
            subset: self.subset.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub name: String,
    pub gamma_list: Vec<f64>,
    pub eta_list: Vec<f64>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub tasks: Vec<String>,
    pub data_fractions: Vec<f64>,
    pub plan_seed: u64,
    /// Also write each cell's test-split `Z` as `<cell-id>.z.fmat`.
    pub persist_features: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            name: "default".into(),
            gamma_list: vec![0.0, 0.05, 0.10, 0.20, 0.30],
            eta_list: vec![0.0, 0.10, 0.20, 0.30, 0.40, 0.50],
            modes: vec![Mode::Lp, Mode::Mlp, Mode::NmtuneMlp],
            seeds: vec![0, 1, 2],
            tasks: vec!["id".into(), "ood".into()],
            data_fractions: vec![0.10, 0.25, 0.50, 0.75, 1.00],
            plan_seed: 0,
            persist_features: false,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(format!("plan {:?}: {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return err("name must be nonempty and contain no path separators".into());
        }
        for (what, empty) in [
            ("gamma_list", self.gamma_list.is_empty()),
            ("eta_list", self.eta_list.is_empty()),
            ("modes", self.modes.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("tasks", self.tasks.is_empty()),
            ("data_fractions", self.data_fractions.is_empty()),
        ] {
            if empty {
                return err(format!("{what} is empty"));
            }
        }
        for &g in self.gamma_list.iter().chain(&self.eta_list) {
            if !(0.0..=1.0).contains(&g) {
                return err(format!("noise ratio {g} outside [0, 1]"));
            }
        }
        for &f in &self.data_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return err(format!("data fraction {f} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceConfig {
    /// Pre-train toy extractors and draw tasks from the generator.
    #[default]
    Simulator,
    /// `train.fmat`, `train.labels`, `test.fmat`, `test.labels` under
    /// `<root>/[seed=<s>/]gamma=<g>/<task>/`.
    Features { root: PathBuf },
    /// Text inputs under `<root>/gamma=<g>/<task>/` embedded by a remote
    /// service.
    Provider {
        provider: ProviderConfig,
        root: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub pretrain_noise: NoiseTemplate,
    #[serde(default)]
    pub downstream: DownstreamSpec,
    #[serde(default)]
    pub downstream_noise: NoiseTemplate,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskSpec>,
    /// One entry per mode; the `seed` field is replaced per cell.
    #[serde(default)]
    pub training: Vec<TrainConfig>,
    #[serde(default = "default_plans")]
    pub plans: Vec<ExperimentPlan>,
    #[serde(default)]
    pub source: SourceConfig,
    /// Worker threads; 0 uses every core. Does not affect results.
    #[serde(default)]
    pub threads: usize,
}

fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            id: "id".into(),
            kind: TaskKind::Id,
            shift: ShiftParams::default(),
        },
        TaskSpec {
            id: "ood".into(),
            kind: TaskKind::Ood,
            shift: ShiftParams {
                rotation: 0.1,
                mean_shift: 0.5,
                cov_inflation: 1.5,
            },
        },
    ]
}

fn default_plans() -> Vec<ExperimentPlan> {
    vec![ExperimentPlan::default()]
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            pretrain: PretrainConfig::default(),
            pretrain_noise: NoiseTemplate::default(),
            downstream: DownstreamSpec::default(),
            downstream_noise: NoiseTemplate::default(),
            tasks: default_tasks(),
            training: Vec::new(),
            plans: default_plans(),
            source: SourceConfig::default(),
            threads: 0,
        }
    }
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Io(crate::io::IoError::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// Makes relative source and cache paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.source {
            SourceConfig::Simulator => {}
            SourceConfig::Features { root } => fix(root),
            SourceConfig::Provider { provider, root } => {
                fix(root);
                if let Some(c) = provider.cache_dir.as_mut() {
                    fix(c);
                }
            }
        }
    }

    pub fn train_config(&self, mode: Mode) -> Option<&TrainConfig> {
        self.training.iter().find(|t| t.mode == mode)
    }

    /// Validates and fills every default, including a training config for
    /// each mode any plan uses.
    pub fn materialized(&self) -> Result<Self, HarnessError> {
        let mut cfg = self.clone();
        let cerr = |m: String| HarnessError::Config(m);
        cfg.synthetic.validate().map_err(|e| cerr(e.to_string()))?;
        if cfg.pretrain_noise.kind == NoiseKind::PairSwap {
            return Err(cerr("pre-training noise must be symmetric or asymmetric".into()));
        }
        for t in &mut cfg.training {
            if t.mode.uses_nmtune() && t.nmtune.is_none() {
                t.nmtune = Some(NmTuneConfig::default());
            }
        }
        for t in &cfg.training {
            t.validate().map_err(|e| cerr(e.to_string()))?;
            if cfg.training.iter().filter(|o| o.mode == t.mode).count() > 1 {
                return Err(cerr(format!("two training configs for {}", t.mode)));
            }
        }
        if cfg.plans.is_empty() {
            return Err(cerr("no plans".into()));
        }
        for (i, p) in cfg.plans.iter().enumerate() {
            p.validate()?;
            if cfg.plans[..i].iter().any(|q| q.name == p.name) {
                return Err(cerr(format!("duplicate plan name {:?}", p.name)));
            }
            for t in &p.tasks {
                if !cfg.tasks.iter().any(|s| &s.id == t) {
                    return Err(cerr(format!("plan {:?} uses undeclared task {t:?}", p.name)));
                }
            }
            for &m in &p.modes {
                if cfg.train_config(m).is_none() {
                    cfg.training.push(TrainConfig::for_mode(m));
                }
            }
        }
        for (i, t) in cfg.tasks.iter().enumerate() {
            if t.id.is_empty() || t.id.contains(['/', '\\', '+']) {
                return Err(cerr(format!(
                    "task id {:?} must be nonempty without '/', '\\\\' or '+'",
                    t.id
                )));
            }
            if cfg.tasks[..i].iter().any(|s| s.id == t.id) {
                return Err(cerr(format!("duplicate task id {:?}", t.id)));
            }
        }
        cfg.training.sort_by_key(|t| t.mode as u8);
        Ok(cfg)
    }

    /// First 16 hex digits of SHA-256 over everything that determines the
    /// plan's results.
    pub fn plan_hash(&self, plan: &ExperimentPlan) -> String {
        let doc = serde_json::json!({
            "synthetic": self.synthetic,
            "pretrain": self.pretrain,
            "pretrain_noise": self.pretrain_noise,
            "downstream": self.downstream,
            "downstream_noise": self.downstream_noise,
            "tasks": self.tasks,
            "training": self.training,
            "source": self.source,
            "plan": plan,
        });
        let digest = Sha256::digest(serde_json::to_vec(&doc).expect("serializable"));
        hex::encode(&digest[..8])
    }
}
