//! Low-rank adapters on the affine layers of a frozen extractor.
//!
//! An adapted layer computes `x W^T + b + s * (x A^T) B^T` where `W, b` stay
//! frozen and only `A` (`r x in`) and `B` (`out x r`) train. `B` starts at
//! zero, so before the first update the adapted network is the frozen one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{relu, relu_backward, LinearHead, NnError};
use crate::linalg::Matrix;
use crate::sim::ToyExtractor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub scaling: f64,
    pub attached_layer: usize,
}

impl LoraAdapter {
    /// Rank is `max(1, in / rank_reduction)`.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        rank_reduction: usize,
        scaling: f64,
        attached_layer: usize,
        rng: &mut R,
    ) -> Self {
        let rank = (inputs / rank_reduction.max(1)).max(1);
        let bound = 1.0 / (inputs as f64).sqrt();
        let a: Vec<f64> = (0..rank * inputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            a: Matrix::from_vec(rank, inputs, a).expect("sized"),
            b: Matrix::zeros(outputs, rank),
            scaling,
            attached_layer,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

/// A frozen linear layer with an adapter.
pub struct LoraLinear<'a> {
    pub base: &'a super::Linear,
    pub adapter: &'a LoraAdapter,
}

pub struct LoraLinearCache {
    pub input: Matrix,
    pub low: Matrix,
    pub pre: Matrix,
}

impl LoraLinear<'_> {
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LoraLinearCache), NnError> {
        let mut pre = self.base.forward(x)?;
        let low = x.matmul_nt(&self.adapter.a)?;
        let delta = low.matmul_nt(&self.adapter.b)?;
        pre.axpy(self.adapter.scaling, &delta)?;
        Ok((
            pre.clone(),
            LoraLinearCache {
                input: x.clone(),
                low,
                pre,
            },
        ))
    }

    /// Returns `(grad_a, grad_b, grad_input)` for a gradient on the
    /// pre-activation output.
    pub fn backward(
        &self,
        cache: &LoraLinearCache,
        grad_pre: &Matrix,
    ) -> Result<(Matrix, Matrix, Matrix), NnError> {
        let s = self.adapter.scaling;
        let grad_b = grad_pre.matmul_tn(&cache.low)?.scale(s);
        let grad_low = grad_pre.matmul(&self.adapter.b)?.scale(s);
        let grad_a = grad_low.matmul_tn(&cache.input)?;
        let mut grad_x = grad_pre.matmul(&self.base.weight)?;
        grad_x.axpy(1.0, &grad_low.matmul(&self.adapter.a)?)?;
        Ok((grad_a, grad_b, grad_x))
    }
}

/// Frozen extractor + one adapter per affine layer + a trainable linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraModel {
    pub base: ToyExtractor,
    pub adapters: Vec<LoraAdapter>,
    pub head: LinearHead,
}

pub struct LoraForward {
    pub caches: Vec<LoraLinearCache>,
    /// Post-activation output of every adapted layer.
    pub outputs: Vec<Matrix>,
    pub logits: Matrix,
}

pub struct LoraGrad {
    pub adapters: Vec<(Matrix, Matrix)>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

impl LoraModel {
    pub fn new<R: Rng + ?Sized>(
        base: ToyExtractor,
        classes: usize,
        rank_reduction: usize,
        scaling: f64,
        rng: &mut R,
    ) -> Self {
        let adapters = base
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                LoraAdapter::init(l.inputs(), l.outputs(), rank_reduction, scaling, i, rng)
            })
            .collect();
        let head = LinearHead::init(base.feature_dim(), classes, rng);
        Self {
            base,
            adapters,
            head,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<LoraForward, NnError> {
        let mut caches = Vec::with_capacity(self.adapters.len());
        let mut outputs = Vec::with_capacity(self.adapters.len());
        let mut h = x.clone();
        for (layer, adapter) in self.base.layers.iter().zip(&self.adapters) {
            let lin = LoraLinear {
                base: layer,
                adapter,
            };
            let (pre, cache) = lin.forward(&h)?;
            h = relu(&pre);
            caches.push(cache);
            outputs.push(h.clone());
        }
        let logits = self.head.logits(&h)?;
        Ok(LoraForward {
            caches,
            outputs,
            logits,
        })
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix, NnError> {
        let mut fwd = self.forward(x)?;
        Ok(fwd.outputs.pop().expect("at least one layer"))
    }

    /// Backprop from the logits gradient plus optional extra gradients on
    /// each adapted layer's output (regularizer terms).
    pub fn backward(
        &self,
        fwd: &LoraForward,
        grad_logits: &Matrix,
        extra: &[Option<Matrix>],
    ) -> Result<LoraGrad, NnError> {
        let feats = fwd.outputs.last().expect("at least one layer");
        let gh = self.head.linear.backward(feats, grad_logits)?;
        let mut grad_out = gh.input;
        let mut adapters = vec![(Matrix::zeros(0, 0), Matrix::zeros(0, 0)); self.adapters.len()];
        for i in (0..self.adapters.len()).rev() {
            if let Some(Some(e)) = extra.get(i) {
                grad_out.axpy(1.0, e)?;
            }
            let cache = &fwd.caches[i];
            let grad_pre = relu_backward(&cache.pre, &grad_out);
            let lin = LoraLinear {
                base: &self.base.layers[i],
                adapter: &self.adapters[i],
            };
            let (ga, gb, gx) = lin.backward(cache, &grad_pre)?;
            adapters[i] = (ga, gb);
            grad_out = gx;
        }
        Ok(LoraGrad {
            adapters,
            head_weight: gh.weight,
            head_bias: gh.bias,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for a in &mut self.adapters {
            out.push(a.a.as_mut_slice());
            out.push(a.b.as_mut_slice());
        }
        let [w, b] = self.head.linear.params_mut();
        out.push(w);
        out.push(b);
        out
    }
}

impl LoraGrad {
    pub fn as_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (a, b) in &self.adapters {
            out.push(a.as_slice());
            out.push(b.as_slice());
        }
        out.push(self.head_weight.as_slice());
        out.push(&self.head_bias);
        out
    }
}
