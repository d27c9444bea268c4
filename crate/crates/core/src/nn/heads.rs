use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{relu, relu_backward, Linear, NnError};
use crate::linalg::Matrix;

/// `C`-way linear classifier on frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub linear: Linear,
}

impl LinearHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::init(dim, classes, rng),
        }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix, NnError> {
        self.linear.forward(x)
    }
}

/// Which activation of the MLP counts as the transformed feature space `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    #[default]
    PostRelu,
    PreRelu,
}

/// Two affine layers with a ReLU between them; the hidden layer is the
/// transformed feature space and the second layer is the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    pub layer1: Linear,
    pub layer2: Linear,
    pub tap: FeatureTap,
}

pub struct MlpForward {
    pub pre: Matrix,
    pub hidden: Matrix,
    pub logits: Matrix,
}

impl MlpForward {
    pub fn features(&self, tap: FeatureTap) -> &Matrix {
        match tap {
            FeatureTap::PostRelu => &self.hidden,
            FeatureTap::PreRelu => &self.pre,
        }
    }
}

pub struct MlpGrad {
    pub layer1_weight: Matrix,
    pub layer1_bias: Vec<f64>,
    pub layer2_weight: Matrix,
    pub layer2_bias: Vec<f64>,
}

impl MlpHead {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        hidden: usize,
        classes: usize,
        tap: FeatureTap,
        rng: &mut R,
    ) -> Self {
        let layer1 = Linear::init(dim, hidden, rng);
        let layer2 = Linear::init(hidden, classes, rng);
        Self {
            layer1,
            layer2,
            tap,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1.outputs()
    }

    pub fn forward(&self, x: &Matrix) -> Result<MlpForward, NnError> {
        let pre = self.layer1.forward(x)?;
        let hidden = relu(&pre);
        let logits = self.layer2.forward(&hidden)?;
        Ok(MlpForward {
            pre,
            hidden,
            logits,
        })
    }

    /// Gradient of the classifier layer and the pull-back of `grad_logits`
    /// onto the tapped feature `Z`.
    pub fn classifier_backward(
        &self,
        fwd: &MlpForward,
        grad_logits: &Matrix,
    ) -> Result<(Linear, Matrix), NnError> {
        let g2 = self.layer2.backward(&fwd.hidden, grad_logits)?;
        let grad_z = match self.tap {
            FeatureTap::PostRelu => g2.input,
            FeatureTap::PreRelu => relu_backward(&fwd.pre, &g2.input),
        };
        Ok((
            Linear {
                weight: g2.weight,
                bias: g2.bias,
            },
            grad_z,
        ))
    }

    /// Finishes backprop from a gradient on the tapped feature.
    pub fn feature_backward(
        &self,
        x: &Matrix,
        fwd: &MlpForward,
        classifier: Linear,
        grad_z: &Matrix,
    ) -> Result<MlpGrad, NnError> {
        let grad_pre = match self.tap {
            FeatureTap::PostRelu => relu_backward(&fwd.pre, grad_z),
            FeatureTap::PreRelu => grad_z.clone(),
        };
        let g1 = self.layer1.backward(x, &grad_pre)?;
        Ok(MlpGrad {
            layer1_weight: g1.weight,
            layer1_bias: g1.bias,
            layer2_weight: classifier.weight,
            layer2_bias: classifier.bias,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let [w1, b1] = self.layer1.params_mut();
        let [w2, b2] = self.layer2.params_mut();
        vec![w1, b1, w2, b2]
    }
}

impl MlpGrad {
    pub fn as_slices(&self) -> Vec<&[f64]> {
        vec![
            self.layer1_weight.as_slice(),
            &self.layer1_bias,
            self.layer2_weight.as_slice(),
            &self.layer2_bias,
        ]
    }
}
