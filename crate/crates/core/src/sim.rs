//! Desk-scale stand-in for noisy pre-training.
//!
//! Data are Gaussian class clusters `x = mu_c + s * eps` with a shared
//! spherical covariance. A small two-layer ReLU extractor is pre-trained with
//! cross-entropy on (possibly corrupted) labels, frozen, and then used as an
//! opaque feature source for downstream tasks drawn from the same generator
//! family. Out-of-domain variants rotate, translate and inflate the
//! downstream generator.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, Matrix};
use crate::nn::{self, FeatureSource, Linear, Mode, NnError, Schedule, TrainConfig, TrainTrace, TunedModel};
use crate::noise::{NoiseError, NoiseKind, NoiseSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator setup: {0}")]
    Config(String),
    #[error("extractor is not frozen")]
    NotFrozen,
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_pretrain_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// Per-coordinate standard deviation of the class means.
    pub mean_scale: f64,
    /// Within-class standard deviation.
    pub within_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_pretrain_classes: 50,
            input_dim: 64,
            samples_per_class: 400,
            mean_scale: 1.0,
            within_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.num_pretrain_classes < 2 {
            return Err(SimError::Config("need at least 2 pre-training classes".into()));
        }
        if self.input_dim == 0 || self.samples_per_class == 0 {
            return Err(SimError::Config("input_dim and samples_per_class must be >= 1".into()));
        }
        if !(self.mean_scale > 0.0 && self.within_scale >= 0.0 && self.within_scale.is_finite()) {
            return Err(SimError::Config(
                "mean_scale must be > 0 and within_scale >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Draws the class means of the pre-training generator.
    pub fn generator(&self) -> Result<Generator, SimError> {
        self.validate()?;
        let mut rng = stream_rng(self.seed, 0);
        let means = gaussian_matrix(
            self.num_pretrain_classes,
            self.input_dim,
            self.mean_scale,
            &mut rng,
        );
        Ok(Generator {
            means,
            within_scale: self.within_scale,
            mean_scale: self.mean_scale,
        })
    }
}

/// Class means plus the shared within-class scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// `C x input_dim`
    pub means: Matrix,
    pub within_scale: f64,
    pub mean_scale: f64,
}

impl Generator {
    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.means.cols()
    }

    /// `per_class` samples of every class, grouped by class.
    pub fn sample<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Dataset {
        self.sample_shifted(per_class, &Shift::identity(self.input_dim()), rng)
    }

    pub fn sample_shifted<R: Rng + ?Sized>(
        &self,
        per_class: usize,
        shift: &Shift,
        rng: &mut R,
    ) -> Dataset {
        let (c, d) = self.means.shape();
        let mut inputs = Matrix::zeros(c * per_class, d);
        let mut labels = Vec::with_capacity(c * per_class);
        let scale = self.within_scale * shift.cov_inflation;
        let mut x = vec![0.0; d];
        for class in 0..c {
            let mu = self.means.row(class);
            for k in 0..per_class {
                for (xi, m) in x.iter_mut().zip(mu) {
                    let e: f64 = rng.sample(StandardNormal);
                    *xi = m + scale * e;
                }
                shift.apply(&x, inputs.row_mut(class * per_class + k));
                labels.push(class);
            }
        }
        Dataset {
            inputs,
            labels,
            num_classes: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `ceil(fraction * per-class count)` samples of each class.
    /// Samples are i.i.d. within a class, so this is a stratified subsample
    /// and smaller fractions give subsets of larger ones.
    pub fn stratified_fraction(&self, fraction: f64) -> Dataset {
        let keep = stratified_indices(&self.labels, self.num_classes, fraction);
        Dataset {
            inputs: self.inputs.select_rows(&keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Sorted indices of the first `ceil(fraction * n_c)` samples of every class
/// (at least one per nonempty class).
pub fn stratified_indices(labels: &[usize], num_classes: usize, fraction: f64) -> Vec<usize> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut keep = Vec::new();
    for idx in &per_class {
        let k = ((fraction * idx.len() as f64).ceil() as usize).clamp(1.min(idx.len()), idx.len());
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    keep
}

/// Raw pre-training data plus the generator that produced it.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub generator: Generator,
    pub train: Dataset,
    /// Clean held-out split for measuring pre-training accuracy.
    pub validation: Dataset,
}

/// Draws the pre-training set: exactly `samples_per_class` points per class.
pub fn generate(spec: &SyntheticSpec) -> Result<PretrainData, SimError> {
    let generator = spec.generator()?;
    let mut rng = stream_rng(spec.seed, 1);
    let train = generator.sample(spec.samples_per_class, &mut rng);
    let mut rng = stream_rng(spec.seed, 2);
    let validation = generator.sample((spec.samples_per_class / 4).max(1), &mut rng);
    Ok(PretrainData {
        generator,
        train,
        validation,
    })
}

/// Affine input-space transform `x -> R (x) + t` plus the within-class
/// inflation applied before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Shift {
    rotation: Option<Matrix>,
    translation: Vec<f64>,
    cov_inflation: f64,
}

impl Shift {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: None,
            translation: vec![0.0; dim],
            cov_inflation: 1.0,
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        match &self.rotation {
            Some(r) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(r.row(i), x);
                }
            }
            None => out.copy_from_slice(x),
        }
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o += t;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftParams {
    /// Angle (radians) applied in every plane of a random orthonormal basis.
    pub rotation: f64,
    /// Length of a random translation of all inputs.
    pub mean_shift: f64,
    /// Extra factor on the within-class standard deviation (0 means 1).
    pub cov_inflation: f64,
}

impl ShiftParams {
    pub fn is_zero(&self) -> bool {
        self.rotation == 0.0 && self.mean_shift == 0.0 && self.inflation() == 1.0
    }

    pub fn inflation(&self) -> f64 {
        if self.cov_inflation == 0.0 {
            1.0
        } else {
            self.cov_inflation
        }
    }

    /// Builds the transform; the basis and translation direction come from
    /// `seed` so every magnitude shares the same directions.
    pub fn build(&self, dim: usize, seed: u64) -> Shift {
        let mut rng = stream_rng(seed, 7);
        let basis = random_orthonormal(dim, &mut rng);
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&dir, &dir).sqrt();
        dir.iter_mut().for_each(|v| *v *= self.mean_shift / norm);
        let rotation = (self.rotation != 0.0).then(|| {
            // R = Q G Q^T with G a block-diagonal of 2x2 rotations
            let (c, s) = (self.rotation.cos(), self.rotation.sin());
            let mut g = Matrix::identity(dim);
            for p in (0..dim.saturating_sub(1)).step_by(2) {
                g.set(p, p, c);
                g.set(p, p + 1, -s);
                g.set(p + 1, p, s);
                g.set(p + 1, p + 1, c);
            }
            basis
                .transpose()
                .matmul(&g)
                .and_then(|qg| qg.matmul(&basis))
                .expect("square")
        });
        Shift {
            rotation,
            translation: dir,
            cov_inflation: self.inflation(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

/// How downstream class means relate to the pre-training classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRegime {
    /// A random subset of the pre-training classes.
    Reused,
    /// Norm-preserving mixtures of two pre-training means.
    #[default]
    Recombined,
    /// Fresh draws from the mean distribution.
    Resampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub regime: ClassRegime,
}

impl Default for DownstreamSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 40,
            test_per_class: 100,
            regime: ClassRegime::Recombined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamTask {
    pub kind: TaskKind,
    pub shift: ShiftParams,
    pub generator: Generator,
    pub train: Dataset,
    pub test: Dataset,
}

/// Builds a downstream task. The class means, the training split and the
/// noise of the test split depend only on `seed`, so an OOD task shares its
/// training data with the ID task of the same seed and its test split is the
/// shifted image of the ID test split.
pub fn make_downstream(
    pretrain: &Generator,
    spec: &DownstreamSpec,
    kind: TaskKind,
    shift: ShiftParams,
    seed: u64,
) -> Result<DownstreamTask, SimError> {
    if spec.num_classes < 2 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(SimError::Config(
            "downstream task needs >= 2 classes and nonempty splits".into(),
        ));
    }
    let dim = pretrain.input_dim();
    let mut rng = stream_rng(seed, 3);
    let means = match spec.regime {
        ClassRegime::Reused => {
            if spec.num_classes > pretrain.num_classes() {
                return Err(SimError::Config(format!(
                    "cannot reuse {} of {} pre-training classes",
                    spec.num_classes,
                    pretrain.num_classes()
                )));
            }
            let picked = index::sample(&mut rng, pretrain.num_classes(), spec.num_classes).into_vec();
            pretrain.means.select_rows(&picked)
        }
        ClassRegime::Recombined => {
            let mut means = Matrix::zeros(spec.num_classes, dim);
            for c in 0..spec.num_classes {
                let pair = index::sample(&mut rng, pretrain.num_classes(), 2).into_vec();
                let (a, b) = (pretrain.means.row(pair[0]), pretrain.means.row(pair[1]));
                for (k, v) in means.row_mut(c).iter_mut().enumerate() {
                    *v = (a[k] + b[k]) / std::f64::consts::SQRT_2;
                }
            }
            means
        }
        ClassRegime::Resampled => {
            gaussian_matrix(spec.num_classes, dim, pretrain.mean_scale, &mut rng)
        }
    };
    let generator = Generator {
        means,
        within_scale: pretrain.within_scale,
        mean_scale: pretrain.mean_scale,
    };
    let train = generator.sample(spec.train_per_class, &mut stream_rng(seed, 4));
    let test_shift = match kind {
        TaskKind::Id => Shift::identity(dim),
        TaskKind::Ood => shift.build(dim, seed),
    };
    let test = generator.sample_shifted(spec.test_per_class, &test_shift, &mut stream_rng(seed, 5));
    Ok(DownstreamTask {
        kind,
        shift: match kind {
            TaskKind::Id => ShiftParams::default(),
            TaskKind::Ood => shift,
        },
        generator,
        train,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSpec {
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            feature_dim: 32,
        }
    }
}

/// Two affine layers, each followed by a ReLU. The pre-training classifier
/// is kept in `head` but plays no part in feature extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyExtractor {
    pub(crate) layers: Vec<Linear>,
    head: Option<Linear>,
    frozen: bool,
}

impl ToyExtractor {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, spec: ExtractorSpec, rng: &mut R) -> Self {
        Self {
            layers: vec![
                Linear::init(input_dim, spec.hidden_dim, rng),
                Linear::init(spec.hidden_dim, spec.feature_dim, rng),
            ],
            head: None,
            frozen: false,
        }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self, SimError> {
        if layers.is_empty() || layers.windows(2).any(|w| w[0].outputs() != w[1].inputs()) {
            return Err(SimError::Config("extractor layers do not chain".into()));
        }
        Ok(Self {
            layers,
            head: None,
            frozen: true,
        })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn pretrain_head(&self) -> Option<&Linear> {
        self.head.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("nonempty").outputs()
    }

    /// Mutable copy for full fine-tuning.
    pub fn thawed(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    /// Post-activation output of every layer.
    pub fn forward_layers(&self, x: &Matrix) -> Result<Vec<Matrix>, NnError> {
        if x.cols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "extractor expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.map(|v| v.max(0.0));
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn extract(&self, x: &Matrix) -> Result<Matrix, NnError> {
        Ok(self.forward_layers(x)?.pop().expect("nonempty"))
    }

    /// Frobenius distance between the layer parameters of two extractors.
    pub fn distance(&self, other: &ToyExtractor) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                let w = a.weight.sub(&b.weight).map_or(f64::INFINITY, |d| d.frobenius_norm());
                let bias: f64 = a.bias.iter().zip(&b.bias).map(|(x, y)| (x - y).powi(2)).sum();
                w * w + bias
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Forward pass of a frozen extractor.
pub fn extract_features(extractor: &ToyExtractor, inputs: &Matrix) -> Result<Matrix, SimError> {
    if !extractor.is_frozen() {
        return Err(SimError::NotFrozen);
    }
    Ok(extractor.extract(inputs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub extractor: ExtractorSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorSpec::default(),
            epochs: 60,
            batch_size: 256,
            lr: 5e-3,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub extractor: ToyExtractor,
    pub trace: TrainTrace,
    /// Accuracy of the pre-training classifier on the corrupted labels.
    pub noisy_train_accuracy: f64,
    /// Accuracy of the pre-training classifier on clean held-out data.
    pub clean_validation_accuracy: f64,
    pub corrupted: usize,
}

/// Pre-trains an extractor on `data` with labels corrupted by `noise`, then
/// freezes it.
pub fn pretrain(
    data: &PretrainData,
    noise: &NoiseSpec,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained, SimError> {
    if noise.kind == NoiseKind::PairSwap {
        return Err(SimError::Config(
            "pre-training accepts symmetric or asymmetric label noise".into(),
        ));
    }
    let corrupted = noise.apply(&data.train.labels, data.train.num_classes)?;
    let mut rng = stream_rng(seed, 6);
    let init = ToyExtractor::init(data.train.inputs.cols(), cfg.extractor, &mut rng);
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        schedule: Schedule::Cosine,
        seed,
        ..TrainConfig::for_mode(Mode::FullFt)
    };
    let source = FeatureSource::Extractor {
        extractor: &init,
        inputs: &data.train.inputs,
    };
    let (model, trace) = nn::train(&source, &corrupted.labels, data.train.num_classes, &tc)?;
    let TunedModel::FullFt { extractor, head } = model else {
        unreachable!("FULL_FT training returns a full model");
    };
    let extractor = ToyExtractor {
        head: Some(head.linear),
        frozen: true,
        ..extractor
    };
    let head = extractor.head.clone().expect("just set");
    let accuracy = |d: &Dataset, labels: &[usize]| -> Result<f64, NnError> {
        let logits = head.forward(&extractor.extract(&d.inputs)?)?;
        let hits = logits
            .row_iter()
            .zip(labels)
            .filter(|(row, &y)| nn::argmax(row) == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    };
    let noisy_train_accuracy = accuracy(&data.train, &corrupted.labels)?;
    let clean_validation_accuracy = accuracy(&data.validation, &data.validation.labels)?;
    Ok(Pretrained {
        extractor,
        trace,
        noisy_train_accuracy,
        clean_validation_accuracy,
        corrupted: corrupted.corrupted_count(),
    })
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Rows form an orthonormal basis (Gram-Schmidt on Gaussian rows).
fn random_orthonormal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Matrix {
    let mut q = gaussian_matrix(dim, dim, 1.0, rng);
    for i in 0..dim {
        for _ in 0..2 {
            for j in 0..i {
                let proj = dot(q.row(i), q.row(j));
                let qj = q.row(j).to_vec();
                q.row_mut(i).iter_mut().zip(&qj).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = dot(q.row(i), q.row(i)).sqrt();
        q.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    q
}
