//! Trainable downstream heads with hand-written backprop.

mod heads;
mod lora;
mod metrics;
mod optim;
mod train;

pub use heads::{FeatureTap, LinearHead, MlpHead, MlpForward};
pub use lora::{LoraAdapter, LoraLinear, LoraModel};
pub use metrics::{confusion_matrix, Evaluation, Metrics};
pub use optim::{cosine_lr, linear_lr, AdamW, AdamWConfig};
pub use train::{
    evaluate, evaluate_outputs, train, EpochStats, FeatureSource, Mode, Schedule, TrainConfig, TrainTrace,
    TunedModel,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::loss::{LossError, LossWithGrad};
use crate::spectrum::SpectrumError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
}

/// Affine layer `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

pub struct LinearGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub input: Matrix,
}

impl Linear {
    /// Weights and bias uniform in `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight: Vec<f64> = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Matrix::from_vec(outputs, inputs, weight).expect("sized"),
            bias,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NnError> {
        let mut y = x.matmul_nt(&self.weight)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<LinearGrad, NnError> {
        let weight = grad_out.matmul_tn(x)?;
        let mut bias = vec![0.0; self.outputs()];
        for row in grad_out.row_iter() {
            for (b, g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        let input = grad_out.matmul(&self.weight)?;
        Ok(LinearGrad {
            weight,
            bias,
            input,
        })
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.as_mut_slice(), self.bias.as_mut_slice()]
    }
}

pub(crate) fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub(crate) fn relu_backward(pre: &Matrix, grad: &Matrix) -> Matrix {
    let mut g = grad.clone();
    for (v, &p) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if p <= 0.0 {
            *v = 0.0;
        }
    }
    g
}

/// Mean cross-entropy of `softmax(logits)` against integer labels, with the
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossWithGrad, NnError> {
    let (m, c) = logits.shape();
    if labels.len() != m {
        return Err(NnError::Shape(format!(
            "{} labels for {m} rows of logits",
            labels.len()
        )));
    }
    let mut grad = Matrix::zeros(m, c);
    let mut total = 0.0;
    let mn = m as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(NnError::Label {
                index: i,
                label: y,
                classes: c,
            });
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        let g = grad.row_mut(i);
        for k in 0..c {
            g[k] = (row[k] - lse).exp() / mn;
        }
        g[y] -= 1.0 / mn;
    }
    Ok(LossWithGrad {
        value: total / mn,
        grad_z: grad,
    })
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
