//! Minibatch training loop shared by every tuning mode.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    argmax, cosine_lr, cross_entropy, linear_lr, relu, relu_backward, AdamW, AdamWConfig,
    Evaluation, FeatureTap, LinearHead, LoraModel, Metrics, MlpHead, NnError,
};
use crate::linalg::Matrix;
use crate::loss::{nmtune_total, NmTuneConfig, SkippedTerms, TermValues};
use crate::sim::ToyExtractor;
use crate::spectrum::{analyze, AnalyzeOptions, SpectrumError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "LP")]
    Lp,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "NMTUNE_MLP")]
    NmtuneMlp,
    #[serde(rename = "LORA")]
    Lora,
    #[serde(rename = "NMTUNE_LORA")]
    NmtuneLora,
    #[serde(rename = "FULL_FT")]
    FullFt,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Lp,
        Mode::Mlp,
        Mode::NmtuneMlp,
        Mode::Lora,
        Mode::NmtuneLora,
        Mode::FullFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lp => "LP",
            Mode::Mlp => "MLP",
            Mode::NmtuneMlp => "NMTUNE_MLP",
            Mode::Lora => "LORA",
            Mode::NmtuneLora => "NMTUNE_LORA",
            Mode::FullFt => "FULL_FT",
        }
    }

    /// Modes that need the extractor itself rather than its features.
    pub fn needs_extractor(self) -> bool {
        matches!(self, Mode::Lora | Mode::NmtuneLora | Mode::FullFt)
    }

    pub fn uses_nmtune(self) -> bool {
        matches!(self, Mode::NmtuneMlp | Mode::NmtuneLora)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: u64,
    /// Regularizer settings; used only by the NMTUNE_* modes.
    #[serde(default)]
    pub nmtune: Option<NmTuneConfig>,
    /// MLP hidden width. Defaults to the input feature dimension so the
    /// consistency term compares matrices of the same shape.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    #[serde(default)]
    pub feature_tap: FeatureTap,
    #[serde(default = "default_rank_reduction")]
    pub lora_rank_reduction: usize,
    #[serde(default = "default_lora_scaling")]
    pub lora_scaling: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_rank_reduction() -> usize {
    8
}
fn default_lora_scaling() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

pub const DEFAULT_BATCH_SIZE: usize = 64;

impl TrainConfig {
    /// Vision-style defaults: 30 epochs, cosine schedule.
    pub fn for_mode(mode: Mode) -> Self {
        let (lr, weight_decay) = match mode {
            Mode::Lp => (0.01, 0.0),
            Mode::Mlp | Mode::NmtuneMlp => (1e-3, 1e-4),
            Mode::Lora | Mode::NmtuneLora => (2e-4, 1e-4),
            Mode::FullFt => (1e-4, 1e-4),
        };
        Self {
            mode,
            epochs: 30,
            batch_size: DEFAULT_BATCH_SIZE,
            lr,
            weight_decay,
            schedule: Schedule::Cosine,
            seed: 0,
            nmtune: mode.uses_nmtune().then(NmTuneConfig::default),
            hidden_dim: None,
            feature_tap: FeatureTap::PostRelu,
            lora_rank_reduction: default_rank_reduction(),
            lora_scaling: default_lora_scaling(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    /// Language-style defaults: 10 epochs, linear schedule.
    pub fn language_style(mode: Mode) -> Self {
        Self {
            epochs: 10,
            schedule: Schedule::Linear,
            ..Self::for_mode(mode)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NnError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(NnError::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(NnError::Config(format!(
                "bad weight decay {}",
                self.weight_decay
            )));
        }
        if self.lora_rank_reduction == 0 {
            return Err(NnError::Config("lora_rank_reduction must be >= 1".into()));
        }
        if let Some(n) = &self.nmtune {
            n.validate()?;
        }
        if self.mode.uses_nmtune() && self.nmtune.is_none() {
            return Err(NnError::Config(format!(
                "{} needs an nmtune section",
                self.mode
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(step, total, self.lr),
            Schedule::Linear => linear_lr(step, total, self.lr),
        }
    }
}

/// Where the training inputs come from.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    /// Precomputed features (files, providers). Only heads can be tuned.
    Features(&'a Matrix),
    /// Raw inputs plus the extractor that maps them to features.
    Extractor {
        extractor: &'a ToyExtractor,
        inputs: &'a Matrix,
    },
}

impl FeatureSource<'_> {
    pub fn len(&self) -> usize {
        match self {
            FeatureSource::Features(f) => f.rows(),
            FeatureSource::Extractor { inputs, .. } => inputs.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frozen features of every sample.
    pub fn features(&self) -> Result<Matrix, NnError> {
        match self {
            FeatureSource::Features(f) => Ok((*f).clone()),
            FeatureSource::Extractor { extractor, inputs } => extractor.extract(inputs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TunedModel {
    Linear(LinearHead),
    Mlp(MlpHead),
    Lora(LoraModel),
    FullFt {
        extractor: ToyExtractor,
        head: LinearHead,
    },
}

impl TunedModel {
    /// Transformed features `Z` and logits for every sample of `source`.
    pub fn forward(&self, source: &FeatureSource) -> Result<(Matrix, Matrix), NnError> {
        match self {
            TunedModel::Linear(h) => {
                let f = source.features()?;
                let logits = h.logits(&f)?;
                Ok((f, logits))
            }
            TunedModel::Mlp(h) => {
                let fwd = h.forward(&source.features()?)?;
                Ok((fwd.features(h.tap).clone(), fwd.logits))
            }
            TunedModel::Lora(m) => {
                let inputs = extractor_inputs(source)?;
                let mut fwd = m.forward(inputs)?;
                let z = fwd.outputs.pop().expect("at least one layer");
                Ok((z, fwd.logits))
            }
            TunedModel::FullFt { extractor, head } => {
                let inputs = extractor_inputs(source)?;
                let z = extractor.extract(inputs)?;
                let logits = head.logits(&z)?;
                Ok((z, logits))
            }
        }
    }

    pub fn predict(&self, source: &FeatureSource) -> Result<Vec<usize>, NnError> {
        let (_, logits) = self.forward(source)?;
        Ok(logits.row_iter().map(argmax).collect())
    }
}

fn extractor_inputs<'a>(source: &FeatureSource<'a>) -> Result<&'a Matrix, NnError> {
    match source {
        FeatureSource::Extractor { inputs, .. } => Ok(inputs),
        FeatureSource::Features(_) => Err(NnError::Config(
            "this model needs raw inputs and an extractor, not precomputed features".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Learning rate used by the last step of the epoch.
    pub lr: f64,
    /// Mean total objective over the epoch's batches.
    pub loss: f64,
    pub ce: f64,
    pub mse: Option<f64>,
    pub cov: Option<f64>,
    pub svd: Option<f64>,
    pub skipped_small_batch: usize,
    pub skipped_degenerate_top: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub mode: Mode,
    pub train_size: usize,
    pub steps: usize,
    pub epochs: Vec<EpochStats>,
    pub train_accuracy: f64,
    /// Frobenius norm of the extractor change; only for FULL_FT.
    pub extractor_delta_norm: Option<f64>,
}

struct BatchOut {
    loss: f64,
    ce: f64,
    terms: TermValues,
    skipped: SkippedTerms,
    grads: Vec<Vec<f64>>,
}

impl BatchOut {
    fn plain(ce: f64, grads: Vec<Vec<f64>>) -> Self {
        Self {
            loss: ce,
            ce,
            terms: TermValues::default(),
            skipped: SkippedTerms::default(),
            grads,
        }
    }
}

trait Learner {
    fn batch(&self, x: &Matrix, labels: &[usize]) -> Result<BatchOut, NnError>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    fn into_model(self) -> TunedModel;
}

struct LpLearner(LinearHead);

impl Learner for LpLearner {
    fn batch(&self, x: &Matrix, labels: &[usize]) -> Result<BatchOut, NnError> {
        let logits = self.0.logits(x)?;
        let ce = cross_entropy(&logits, labels)?;
        let g = self.0.linear.backward(x, &ce.grad_z)?;
        Ok(BatchOut::plain(ce.value, vec![g.weight.into_vec(), g.bias]))
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.0.linear.params_mut().into()
    }

    fn into_model(self) -> TunedModel {
        TunedModel::Linear(self.0)
    }
}

struct MlpLearner {
    head: MlpHead,
    nmtune: Option<NmTuneConfig>,
}

impl Learner for MlpLearner {
    fn batch(&self, x: &Matrix, labels: &[usize]) -> Result<BatchOut, NnError> {
        let fwd = self.head.forward(x)?;
        let ce = cross_entropy(&fwd.logits, labels)?;
        let (classifier, grad_z) = self.head.classifier_backward(&fwd, &ce.grad_z)?;
        let (loss, grad_z, terms, skipped) = match &self.nmtune {
            Some(cfg) => {
                let z = fwd.features(self.head.tap);
                let t = nmtune_total(ce.value, &grad_z, x, z, cfg)?;
                (t.value, t.grad_z, t.terms, t.skipped)
            }
            None => (ce.value, grad_z, TermValues::default(), SkippedTerms::default()),
        };
        let g = self.head.feature_backward(x, &fwd, classifier, &grad_z)?;
        Ok(BatchOut {
            loss,
            ce: ce.value,
            terms,
            skipped,
            grads: g.as_slices().into_iter().map(<[f64]>::to_vec).collect(),
        })
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.head.params_mut()
    }

    fn into_model(self) -> TunedModel {
        TunedModel::Mlp(self.head)
    }
}

struct LoraLearner {
    model: LoraModel,
    nmtune: Option<NmTuneConfig>,
}

impl Learner for LoraLearner {
    fn batch(&self, x: &Matrix, labels: &[usize]) -> Result<BatchOut, NnError> {
        let fwd = self.model.forward(x)?;
        let ce = cross_entropy(&fwd.logits, labels)?;
        let layers = fwd.outputs.len();
        let mut extra: Vec<Option<Matrix>> = vec![None; layers];
        let mut loss = ce.value;
        let mut terms = TermValues::default();
        let mut skipped = SkippedTerms::default();
        if let Some(cfg) = &self.nmtune {
            // frozen activations of the same layers pair with the adapted ones
            let frozen = self.model.base.forward_layers(x)?;
            let mut sums = [(0.0, 0usize); 3];
            for (l, (z, f)) in fwd.outputs.iter().zip(&frozen).enumerate() {
                let zero = Matrix::zeros(z.rows(), z.cols());
                let t = nmtune_total(0.0, &zero, f, z, cfg)?;
                loss += t.value / layers as f64;
                extra[l] = Some(t.grad_z.scale(1.0 / layers as f64));
                for (slot, v) in sums.iter_mut().zip([t.terms.mse, t.terms.cov, t.terms.svd]) {
                    if let Some(v) = v {
                        slot.0 += v;
                        slot.1 += 1;
                    }
                }
                skipped.small_batch |= t.skipped.small_batch;
                skipped.degenerate_top |= t.skipped.degenerate_top;
            }
            let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
            terms = TermValues {
                mse: mean(sums[0]),
                cov: mean(sums[1]),
                svd: mean(sums[2]),
            };
        }
        let g = self.model.backward(&fwd, &ce.grad_z, &extra)?;
        Ok(BatchOut {
            loss,
            ce: ce.value,
            terms,
            skipped,
            grads: g.as_slices().into_iter().map(<[f64]>::to_vec).collect(),
        })
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.model.params_mut()
    }

    fn into_model(self) -> TunedModel {
        TunedModel::Lora(self.model)
    }
}

struct FullFtLearner {
    extractor: ToyExtractor,
    head: LinearHead,
}

impl Learner for FullFtLearner {
    fn batch(&self, x: &Matrix, labels: &[usize]) -> Result<BatchOut, NnError> {
        let mut inputs = Vec::with_capacity(self.extractor.layers.len());
        let mut pres = Vec::with_capacity(self.extractor.layers.len());
        let mut h = x.clone();
        for layer in &self.extractor.layers {
            let pre = layer.forward(&h)?;
            inputs.push(h);
            h = relu(&pre);
            pres.push(pre);
        }
        let logits = self.head.logits(&h)?;
        let ce = cross_entropy(&logits, labels)?;
        let gh = self.head.linear.backward(&h, &ce.grad_z)?;
        let mut grads = vec![Vec::new(); 2 * self.extractor.layers.len()];
        let mut grad = gh.input;
        for i in (0..self.extractor.layers.len()).rev() {
            let gp = relu_backward(&pres[i], &grad);
            let g = self.extractor.layers[i].backward(&inputs[i], &gp)?;
            grads[2 * i] = g.weight.into_vec();
            grads[2 * i + 1] = g.bias;
            grad = g.input;
        }
        grads.push(gh.weight.into_vec());
        grads.push(gh.bias);
        Ok(BatchOut::plain(ce.value, grads))
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.extractor.layers {
            out.extend(l.params_mut());
        }
        out.extend(self.head.linear.params_mut());
        out
    }

    fn into_model(self) -> TunedModel {
        TunedModel::FullFt {
            extractor: self.extractor,
            head: self.head,
        }
    }
}

/// Trains a head (or adapters, or the whole toy extractor) on `source`.
///
/// Initialization draws from `ChaCha8(seed)` stream 0 and the epoch shuffles
/// from stream 1, so equal configs give bit-identical results.
pub fn train(
    source: &FeatureSource,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<(TunedModel, TrainTrace), NnError> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(NnError::Config("empty training set".into()));
    }
    if labels.len() != source.len() {
        return Err(NnError::Shape(format!(
            "{} labels for {} samples",
            labels.len(),
            source.len()
        )));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(NnError::Label {
            index,
            label,
            classes: num_classes,
        });
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(0);
    let nmtune = if cfg.mode.uses_nmtune() {
        cfg.nmtune
    } else {
        None
    };

    match cfg.mode {
        Mode::Lp => {
            let x = source.features()?;
            let head = LinearHead::init(x.cols(), num_classes, &mut init_rng);
            run(LpLearner(head), &x, labels, cfg, None)
        }
        Mode::Mlp | Mode::NmtuneMlp => {
            let x = source.features()?;
            let hidden = cfg.hidden_dim.unwrap_or(x.cols());
            if let Some(n) = &nmtune {
                if n.w_mse != 0.0 && n.lambda != 0.0 && hidden != x.cols() {
                    return Err(NnError::Shape(format!(
                        "consistency term needs hidden_dim == feature dim ({} != {})",
                        hidden,
                        x.cols()
                    )));
                }
            }
            let head = MlpHead::init(x.cols(), hidden, num_classes, cfg.feature_tap, &mut init_rng);
            run(MlpLearner { head, nmtune }, &x, labels, cfg, None)
        }
        Mode::Lora | Mode::NmtuneLora => {
            let (extractor, inputs) = match source {
                FeatureSource::Extractor { extractor, inputs } => (*extractor, *inputs),
                FeatureSource::Features(_) => {
                    return Err(NnError::Config(format!(
                        "{} needs the simulator extractor, not feature files",
                        cfg.mode
                    )))
                }
            };
            let model = LoraModel::new(
                extractor.clone(),
                num_classes,
                cfg.lora_rank_reduction,
                cfg.lora_scaling,
                &mut init_rng,
            );
            run(LoraLearner { model, nmtune }, inputs, labels, cfg, None)
        }
        Mode::FullFt => {
            let (extractor, inputs) = match source {
                FeatureSource::Extractor { extractor, inputs } => (*extractor, *inputs),
                FeatureSource::Features(_) => {
                    return Err(NnError::Config(
                        "FULL_FT has no parameters to tune on feature files".into(),
                    ))
                }
            };
            let head = LinearHead::init(extractor.feature_dim(), num_classes, &mut init_rng);
            let learner = FullFtLearner {
                extractor: extractor.thawed(),
                head,
            };
            run(learner, inputs, labels, cfg, Some(extractor))
        }
    }
}

fn run<L: Learner>(
    mut learner: L,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    original: Option<&ToyExtractor>,
) -> Result<(TunedModel, TrainTrace), NnError> {
    let n = x.rows();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.adam());
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = EpochAccumulator::default();
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = learner.batch(&xb, &yb)?;
            let finite = out.loss.is_finite()
                && out.grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(NnError::TrainingDiverged {
                    epoch,
                    loss: out.loss,
                });
            }
            lr = cfg.lr_at(step, total_steps);
            let grads: Vec<&[f64]> = out.grads.iter().map(Vec::as_slice).collect();
            opt.step(learner.params_mut(), &grads, lr);
            acc.add(&out);
            step += 1;
        }
        epochs.push(acc.finish(epoch, lr));
    }

    let model = learner.into_model();
    let source = match &model {
        TunedModel::Linear(_) | TunedModel::Mlp(_) => FeatureSource::Features(x),
        TunedModel::Lora(m) => FeatureSource::Extractor {
            extractor: &m.base,
            inputs: x,
        },
        TunedModel::FullFt { extractor, .. } => FeatureSource::Extractor { extractor, inputs: x },
    };
    let preds = model.predict(&source)?;
    let train_accuracy = Metrics::compute(labels, &preds, num_classes_of(&model)).accuracy;
    let extractor_delta_norm = match (&model, original) {
        (TunedModel::FullFt { extractor, .. }, Some(orig)) => Some(extractor.distance(orig)),
        _ => None,
    };
    Ok((
        model,
        TrainTrace {
            mode: cfg.mode,
            train_size: n,
            steps: step,
            epochs,
            train_accuracy,
            extractor_delta_norm,
        },
    ))
}

fn num_classes_of(model: &TunedModel) -> usize {
    match model {
        TunedModel::Linear(h) => h.linear.outputs(),
        TunedModel::Mlp(h) => h.layer2.outputs(),
        TunedModel::Lora(m) => m.head.linear.outputs(),
        TunedModel::FullFt { head, .. } => head.linear.outputs(),
    }
}

#[derive(Default)]
struct EpochAccumulator {
    batches: usize,
    loss: f64,
    ce: f64,
    terms: [(f64, usize); 3],
    skipped_small: usize,
    skipped_top: usize,
}

impl EpochAccumulator {
    fn add(&mut self, out: &BatchOut) {
        self.batches += 1;
        self.loss += out.loss;
        self.ce += out.ce;
        for (slot, v) in self
            .terms
            .iter_mut()
            .zip([out.terms.mse, out.terms.cov, out.terms.svd])
        {
            if let Some(v) = v {
                slot.0 += v;
                slot.1 += 1;
            }
        }
        self.skipped_small += out.skipped.small_batch as usize;
        self.skipped_top += out.skipped.degenerate_top as usize;
    }

    fn finish(self, epoch: usize, lr: f64) -> EpochStats {
        let b = self.batches.max(1) as f64;
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        EpochStats {
            epoch,
            lr,
            loss: self.loss / b,
            ce: self.ce / b,
            mse: mean(self.terms[0]),
            cov: mean(self.terms[1]),
            svd: mean(self.terms[2]),
            skipped_small_batch: self.skipped_small,
            skipped_degenerate_top: self.skipped_top,
        }
    }
}

/// Accuracy, macro-F1 and the spectrum of the model's feature space `Z`.
pub fn evaluate(
    model: &TunedModel,
    source: &FeatureSource,
    labels: &[usize],
    dataset_id: &str,
) -> Result<Evaluation, NnError> {
    let (z, logits) = model.forward(source)?;
    let model_id = match model {
        TunedModel::Linear(_) => "linear",
        TunedModel::Mlp(_) => "mlp",
        TunedModel::Lora(_) => "lora",
        TunedModel::FullFt { .. } => "full_ft",
    };
    evaluate_outputs(&z, &logits, labels, dataset_id, model_id)
}

/// Metrics and spectrum from an already computed forward pass.
pub fn evaluate_outputs(
    z: &Matrix,
    logits: &Matrix,
    labels: &[usize],
    dataset_id: &str,
    model_id: &str,
) -> Result<Evaluation, NnError> {
    if labels.len() != logits.rows() {
        return Err(NnError::Shape(format!(
            "{} labels for {} samples",
            labels.len(),
            logits.rows()
        )));
    }
    let classes = logits.cols();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(NnError::Label {
            index,
            label,
            classes,
        });
    }
    let predictions: Vec<usize> = logits.row_iter().map(argmax).collect();
    let metrics = Metrics::compute(labels, &predictions, classes);
    let spectrum = match analyze(z, dataset_id, model_id, AnalyzeOptions::default()) {
        Ok(r) => Some(r),
        Err(SpectrumError::ZeroSpectrum) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(Evaluation {
        metrics,
        spectrum,
        predictions,
    })
}
