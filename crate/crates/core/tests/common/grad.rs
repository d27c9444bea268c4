//! Finite-difference checks shared by the gradient tests and the acceptance
//! suite. Each `*_worst` routine returns the largest relative error seen.

use super::{gaussian, matrix_with, max_rel_err, numeric_grad, rng};
use nmtune::linalg::Matrix;
use nmtune::loss::{
    covariance_penalty, dominant_sv_penalty, mse_consistency, nmtune_total, MseNormalization,
    NmTuneConfig,
};
use nmtune::nn::{cross_entropy, FeatureTap, LinearHead, LoraModel, MlpHead};
use nmtune::sim::{ExtractorSpec, ToyExtractor};
use rand::Rng;

pub const H: f64 = 1e-5;

pub fn labels(m: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..m).map(|_| r.random_range(0..classes)).collect()
}

/// Relative FD error of a loss on a single matrix argument.
pub fn fd_matrix(z: &Matrix, grad: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    let shape = z.shape();
    let num = numeric_grad(|x| f(&matrix_with(shape, x)), z.as_slice(), H);
    max_rel_err(grad.as_slice(), &num)
}

/// Flattens parameter slices, runs FD on `loss(params)` and compares.
pub fn fd_params(
    params: Vec<Vec<f64>>,
    analytic: Vec<Vec<f64>>,
    loss: impl Fn(&[Vec<f64>]) -> f64,
) -> f64 {
    let sizes: Vec<usize> = params.iter().map(Vec::len).collect();
    let flat: Vec<f64> = params.concat();
    let split = |x: &[f64]| {
        let mut out = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for &n in &sizes {
            out.push(x[at..at + n].to_vec());
            at += n;
        }
        out
    };
    let num = numeric_grad(|x| loss(&split(x)), &flat, H);
    max_rel_err(&analytic.concat(), &num)
}

/// No pre-activation within `margin` of the ReLU kink, so central differences
/// stay on one side of it.
pub fn clear_of_kinks(pre: &Matrix, margin: f64) -> bool {
    pre.as_slice().iter().all(|v| v.abs() > margin)
}

/// MSE, covariance, dominant-SV and cross-entropy terms on twenty shapes.
pub fn regularizers_worst() -> [f64; 4] {
    let mut worst = [0.0f64; 4];
    for seed in 0..20u64 {
        let m = 4 + (seed as usize % 5) * 3;
        let d = 3 + seed as usize % 6;
        let (f, z) = (gaussian(m, d, 500 + seed), gaussian(m, d, 600 + seed));
        let y = labels(m, d, seed);
        let g = mse_consistency(&f, &z, MseNormalization::PerRow).unwrap();
        worst[0] = worst[0].max(fd_matrix(&z, &g.grad_z, |z| {
            mse_consistency(&f, z, MseNormalization::PerRow).unwrap().value
        }));
        let g = covariance_penalty(&z, 2).unwrap();
        worst[1] = worst[1].max(fd_matrix(&z, &g.grad_z, |z| covariance_penalty(z, 2).unwrap().value));
        let g = dominant_sv_penalty(&z).unwrap();
        worst[2] = worst[2].max(fd_matrix(&z, &g.grad_z, |z| dominant_sv_penalty(z).unwrap().value));
        let g = cross_entropy(&z, &y).unwrap();
        worst[3] = worst[3].max(fd_matrix(&z, &g.grad_z, |l| cross_entropy(l, &y).unwrap().value));
    }
    worst
}

pub fn linear_probe_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (m, d, c) = (6 + seed as usize % 5, 4, 3);
        let x = gaussian(m, d, 700 + seed);
        let y = labels(m, c, seed);
        let head = LinearHead::init(d, c, &mut rng(seed));
        let ce = cross_entropy(&head.logits(&x).unwrap(), &y).unwrap();
        let g = head.linear.backward(&x, &ce.grad_z).unwrap();
        let params = vec![head.linear.weight.as_slice().to_vec(), head.linear.bias.clone()];
        let err = fd_params(params, vec![g.weight.into_vec(), g.bias], |p| {
            let mut h = head.clone();
            h.linear.weight.as_mut_slice().copy_from_slice(&p[0]);
            h.linear.bias.copy_from_slice(&p[1]);
            cross_entropy(&h.logits(&x).unwrap(), &y).unwrap().value
        });
        worst = worst.max(err);
    }
    worst
}

fn mlp_loss(head: &MlpHead, x: &Matrix, y: &[usize], cfg: Option<&NmTuneConfig>) -> f64 {
    let fwd = head.forward(x).unwrap();
    let ce = cross_entropy(&fwd.logits, y).unwrap();
    match cfg {
        Some(cfg) => {
            let z = fwd.features(head.tap);
            let zero = Matrix::zeros(z.rows(), z.cols());
            nmtune_total(ce.value, &zero, x, z, cfg).unwrap().value
        }
        None => ce.value,
    }
}

/// MLP head on twenty instances clear of the ReLU kink, with the regularizer
/// on `tap` when `cfg` is set and plain cross-entropy otherwise.
pub fn mlp_worst(tap: FeatureTap, cfg: Option<&NmTuneConfig>) -> f64 {
    let mut worst: f64 = 0.0;
    let mut seed = 0u64;
    let mut done = 0;
    while done < 20 {
        seed += 1;
        let (m, d, c) = (8, 5, 3);
        let x = gaussian(m, d, 800 + seed);
        let y = labels(m, c, seed);
        let head = MlpHead::init(d, d, c, tap, &mut rng(seed));
        let fwd = head.forward(&x).unwrap();
        if !clear_of_kinks(&fwd.pre, 1e-3) {
            continue;
        }
        let ce = cross_entropy(&fwd.logits, &y).unwrap();
        let (classifier, grad_z) = head.classifier_backward(&fwd, &ce.grad_z).unwrap();
        let grad_z = match cfg {
            Some(cfg) => {
                let total = nmtune_total(ce.value, &grad_z, &x, fwd.features(tap), cfg).unwrap();
                if total.skipped.degenerate_top || total.terms.svd.is_none() {
                    continue;
                }
                total.grad_z
            }
            None => grad_z,
        };
        let g = head.feature_backward(&x, &fwd, classifier, &grad_z).unwrap();
        let analytic = g.as_slices().into_iter().map(<[f64]>::to_vec).collect();
        let mut probe = head.clone();
        let params = probe.params_mut().into_iter().map(|s| s.to_vec()).collect();
        let err = fd_params(params, analytic, |p| {
            let mut h = head.clone();
            for (dst, src) in h.params_mut().into_iter().zip(p) {
                dst.copy_from_slice(src);
            }
            mlp_loss(&h, &x, &y, cfg)
        });
        worst = worst.max(err);
        done += 1;
    }
    worst
}

/// Loss of the LoRA learner: cross-entropy plus the regularizer averaged over
/// the adapted layers.
fn lora_loss(model: &LoraModel, x: &Matrix, y: &[usize], cfg: Option<&NmTuneConfig>) -> f64 {
    let fwd = model.forward(x).unwrap();
    let mut loss = cross_entropy(&fwd.logits, y).unwrap().value;
    if let Some(cfg) = cfg {
        let frozen = model.base.forward_layers(x).unwrap();
        let layers = fwd.outputs.len() as f64;
        for (z, f) in fwd.outputs.iter().zip(&frozen) {
            let zero = Matrix::zeros(z.rows(), z.cols());
            loss += nmtune_total(0.0, &zero, f, z, cfg).unwrap().value / layers;
        }
    }
    loss
}

pub fn lora_worst(cfg: Option<&NmTuneConfig>) -> f64 {
    let mut worst: f64 = 0.0;
    let mut seed = 0u64;
    let mut done = 0;
    while done < 20 {
        seed += 1;
        let mut r = rng(seed);
        let base = ToyExtractor::init(
            5,
            ExtractorSpec {
                hidden_dim: 6,
                feature_dim: 4,
            },
            &mut r,
        );
        let base = ToyExtractor::from_layers(base.layers().to_vec()).unwrap();
        let mut model = LoraModel::new(base, 3, 2, 1.0, &mut r);
        // move off the zero init so every adapter factor gets a gradient
        for a in &mut model.adapters {
            for v in a.b.as_mut_slice() {
                *v = r.random_range(-0.5..0.5);
            }
        }
        let x = gaussian(8, 5, 1_000 + seed);
        let y = labels(8, 3, seed);
        let fwd = model.forward(&x).unwrap();
        if fwd.caches.iter().any(|c| !clear_of_kinks(&c.pre, 1e-3)) {
            continue;
        }
        let ce = cross_entropy(&fwd.logits, &y).unwrap();
        let layers = fwd.outputs.len() as f64;
        let mut extra = vec![None; fwd.outputs.len()];
        if let Some(cfg) = cfg {
            let frozen = model.base.forward_layers(&x).unwrap();
            let mut degenerate = false;
            for (l, (z, f)) in fwd.outputs.iter().zip(&frozen).enumerate() {
                let zero = Matrix::zeros(z.rows(), z.cols());
                let t = nmtune_total(0.0, &zero, f, z, cfg).unwrap();
                degenerate |= t.skipped.degenerate_top;
                extra[l] = Some(t.grad_z.scale(1.0 / layers));
            }
            if degenerate {
                continue;
            }
        }
        let g = model.backward(&fwd, &ce.grad_z, &extra).unwrap();
        let analytic = g.as_slices().into_iter().map(<[f64]>::to_vec).collect();
        let mut probe = model.clone();
        let params = probe.params_mut().into_iter().map(|s| s.to_vec()).collect();
        let err = fd_params(params, analytic, |p| {
            let mut m = model.clone();
            for (dst, src) in m.params_mut().into_iter().zip(p) {
                dst.copy_from_slice(src);
            }
            lora_loss(&m, &x, &y, cfg)
        });
        worst = worst.max(err);
        done += 1;
    }
    worst
}
