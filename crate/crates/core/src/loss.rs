//! Feature-space regularizers applied to a transformed feature batch `Z`, with
//! closed-form gradients `dL/dZ`.
//!
//! * consistency: squared distance between normalized frozen features `F`
//!   and normalized `Z`;
//! * covariance: mean squared off-diagonal entry of the sample covariance of
//!   `Z` (scaled by `1/D`);
//! * dominant singular value: `-sigma_1 / sum_j sigma_j` of `Z`.
//!
//! [`nmtune_total`] adds the weighted sum of the three to a cross-entropy
//! value and gradient computed by the caller.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{covariance, dot, svd, LinalgError, Matrix};

/// Relative gap below which the top two singular values count as tied.
pub const TOP_GAP_RELATIVE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: F is {f:?}, Z is {z:?}")]
    Shape {
        f: (usize, usize),
        z: (usize, usize),
    },
    #[error("batch of {rows} rows is below the minimum of {min}")]
    DegenerateSample { rows: usize, min: usize },
    #[error("top singular values are tied ({sigma1} vs {sigma2})")]
    DegenerateTopSingularValue { sigma1: f64, sigma2: f64 },
    #[error("feature batch is identically zero")]
    ZeroFeatures,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    /// Gradient with respect to the loss input, same shape as that input.
    pub grad_z: Matrix,
}

/// How the consistency term normalizes `F` and `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseNormalization {
    /// Unit-normalize each sample, average the squared distances over rows.
    #[default]
    PerRow,
    /// Divide each matrix by its Frobenius norm; no averaging.
    Frobenius,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmTuneConfig {
    pub lambda: f64,
    pub w_mse: f64,
    pub w_cov: f64,
    pub w_svd: f64,
    pub batch_min: usize,
    pub mse_normalization: MseNormalization,
}

impl Default for NmTuneConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            w_mse: 1.0,
            w_cov: 1.0,
            w_svd: 1.0,
            batch_min: 2,
            mse_normalization: MseNormalization::PerRow,
        }
    }
}

impl NmTuneConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let weights = [self.lambda, self.w_mse, self.w_cov, self.w_svd];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::Config(
                "lambda and term weights must be finite and >= 0".into(),
            ));
        }
        if self.batch_min < 2 {
            return Err(LossError::Config("batch_min must be >= 2".into()));
        }
        Ok(())
    }
}

fn check_same_shape(f: &Matrix, z: &Matrix) -> Result<(), LossError> {
    if f.shape() != z.shape() {
        return Err(LossError::Shape {
            f: f.shape(),
            z: z.shape(),
        });
    }
    Ok(())
}

/// Consistency between frozen features `f` and transformed features `z`.
/// `f` is a constant; the gradient flows through the normalization of `z`.
/// Zero rows (or a zero matrix, in Frobenius mode) normalize to zero and get
/// a zero gradient.
pub fn mse_consistency(
    f: &Matrix,
    z: &Matrix,
    mode: MseNormalization,
) -> Result<LossWithGrad, LossError> {
    check_same_shape(f, z)?;
    match mode {
        MseNormalization::PerRow => Ok(mse_per_row(f, z)),
        MseNormalization::Frobenius => Ok(mse_frobenius(f, z)),
    }
}

fn mse_per_row(f: &Matrix, z: &Matrix) -> LossWithGrad {
    let m = z.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let (fr, zr) = (f.row(i), z.row(i));
        let fn_ = dot(fr, fr).sqrt();
        let zn = dot(zr, zr).sqrt();
        let f_hat: Vec<f64> = fr
            .iter()
            .map(|v| if fn_ > 0.0 { v / fn_ } else { 0.0 })
            .collect();
        let z_hat: Vec<f64> = zr
            .iter()
            .map(|v| if zn > 0.0 { v / zn } else { 0.0 })
            .collect();
        let diff: Vec<f64> = z_hat.iter().zip(&f_hat).map(|(a, b)| a - b).collect();
        value += dot(&diff, &diff);
        if zn > 0.0 {
            // d/dz of ||z/|z| - f_hat||^2 = (I - z_hat z_hat^T) * 2 (z_hat - f_hat) / |z|
            let proj = dot(&z_hat, &diff);
            let g = grad.row_mut(i);
            for k in 0..g.len() {
                g[k] = 2.0 * (diff[k] - z_hat[k] * proj) / (zn * m);
            }
        }
    }
    LossWithGrad {
        value: value / m,
        grad_z: grad,
    }
}

fn mse_frobenius(f: &Matrix, z: &Matrix) -> LossWithGrad {
    let fn_ = f.frobenius_norm();
    let zn = z.frobenius_norm();
    let f_hat = if fn_ > 0.0 { f.scale(1.0 / fn_) } else { f.scale(0.0) };
    let z_hat = if zn > 0.0 { z.scale(1.0 / zn) } else { z.scale(0.0) };
    let diff = z_hat.sub(&f_hat).expect("same shape");
    let value = dot(diff.as_slice(), diff.as_slice());
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    if zn > 0.0 {
        let proj = dot(z_hat.as_slice(), diff.as_slice());
        for ((g, d), h) in grad
            .as_mut_slice()
            .iter_mut()
            .zip(diff.as_slice())
            .zip(z_hat.as_slice())
        {
            *g = 2.0 * (d - h * proj) / zn;
        }
    }
    LossWithGrad {
        value,
        grad_z: grad,
    }
}

/// `(1/D) * sum_{i != j} C(z)_ij^2`.
pub fn covariance_penalty(z: &Matrix, batch_min: usize) -> Result<LossWithGrad, LossError> {
    let min = batch_min.max(2);
    if z.rows() < min {
        return Err(LossError::DegenerateSample {
            rows: z.rows(),
            min,
        });
    }
    let d = z.cols();
    let mut c = covariance(z)?;
    let mut value = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let v = c.get(i, j);
                value += v * v;
            } else {
                c.set(i, j, 0.0);
            }
        }
    }
    let dn = d as f64;
    value /= dn;
    // dL/dC = (2/D) offdiag(C);  dL/dZ = 2/(M-1) * Zc * dL/dC. The rows of
    // Zc * G sum to zero, so the centering step adds nothing.
    let zc = z.centered();
    let mut grad = zc.matmul(&c)?;
    let k = 4.0 / (dn * (z.rows() - 1) as f64);
    grad.as_mut_slice().iter_mut().for_each(|v| *v *= k);
    Ok(LossWithGrad {
        value,
        grad_z: grad,
    })
}

/// `-sigma_1 / sum_j sigma_j` with gradient from `d sigma_j / dZ = u_j v_j^T`.
/// Directions with a zero singular value contribute nothing.
pub fn dominant_sv_penalty(z: &Matrix) -> Result<LossWithGrad, LossError> {
    let dec = svd(z)?;
    let sigma = &dec.sigma;
    let s1 = sigma[0];
    if s1 == 0.0 {
        return Err(LossError::ZeroFeatures);
    }
    if let Some(&s2) = sigma.get(1) {
        if s1 - s2 < TOP_GAP_RELATIVE * s1 {
            return Err(LossError::DegenerateTopSingularValue {
                sigma1: s1,
                sigma2: s2,
            });
        }
    }
    let total: f64 = sigma.iter().sum();
    let value = -s1 / total;

    // grad = -(S * u1 v1^T - s1 * sum_j u_j v_j^T) / S^2
    //      = sum_j c_j u_j v_j^T, c_1 = -(S - s1)/S^2, c_j = s1/S^2
    let s2 = total * total;
    let coef: Vec<f64> = sigma
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            if s == 0.0 {
                0.0
            } else if j == 0 {
                -(total - s1) / s2
            } else {
                s1 / s2
            }
        })
        .collect();
    let mut uc = dec.u.clone();
    for r in 0..uc.rows() {
        for (v, c) in uc.row_mut(r).iter_mut().zip(&coef) {
            *v *= c;
        }
    }
    let grad = uc.matmul(&dec.vt)?;
    Ok(LossWithGrad {
        value,
        grad_z: grad,
    })
}

/// Per-term values of one regularized evaluation (unweighted).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub mse: Option<f64>,
    pub cov: Option<f64>,
    pub svd: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTerms {
    /// Batch smaller than `batch_min`: covariance and SVD terms dropped.
    pub small_batch: bool,
    /// Top singular values tied: SVD term dropped.
    pub degenerate_top: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmTuneLoss {
    pub value: f64,
    pub grad_z: Matrix,
    pub terms: TermValues,
    pub skipped: SkippedTerms,
}

/// `ce + lambda * (w_mse * L_mse + w_cov * L_cov + w_svd * L_svd)`.
///
/// `ce_grad_z` is the cross-entropy gradient already pulled back to `z`.
/// Terms with zero weight (or `lambda == 0`) are not evaluated, so the result
/// is then exactly the cross-entropy input.
pub fn nmtune_total(
    ce_value: f64,
    ce_grad_z: &Matrix,
    f: &Matrix,
    z: &Matrix,
    cfg: &NmTuneConfig,
) -> Result<NmTuneLoss, LossError> {
    if ce_grad_z.shape() != z.shape() {
        return Err(LossError::Shape {
            f: ce_grad_z.shape(),
            z: z.shape(),
        });
    }
    let mut out = NmTuneLoss {
        value: ce_value,
        grad_z: ce_grad_z.clone(),
        terms: TermValues::default(),
        skipped: SkippedTerms::default(),
    };
    if cfg.lambda == 0.0 {
        return Ok(out);
    }
    let mut reg = 0.0;
    let mut reg_grad: Option<Matrix> = None;
    let mut accumulate = |w: f64, lg: LossWithGrad, reg: &mut f64| {
        *reg += w * lg.value;
        match reg_grad.as_mut() {
            Some(g) => g.axpy(w, &lg.grad_z).expect("same shape"),
            None => reg_grad = Some(lg.grad_z.scale(w)),
        }
    };

    if cfg.w_mse != 0.0 {
        let t = mse_consistency(f, z, cfg.mse_normalization)?;
        out.terms.mse = Some(t.value);
        accumulate(cfg.w_mse, t, &mut reg);
    }
    let small = z.rows() < cfg.batch_min.max(2);
    if cfg.w_cov != 0.0 {
        if small {
            out.skipped.small_batch = true;
        } else {
            let t = covariance_penalty(z, cfg.batch_min)?;
            out.terms.cov = Some(t.value);
            accumulate(cfg.w_cov, t, &mut reg);
        }
    }
    if cfg.w_svd != 0.0 {
        if small {
            out.skipped.small_batch = true;
        } else {
            match dominant_sv_penalty(z) {
                Ok(t) => {
                    out.terms.svd = Some(t.value);
                    accumulate(cfg.w_svd, t, &mut reg);
                }
                Err(LossError::DegenerateTopSingularValue { .. }) => {
                    out.skipped.degenerate_top = true;
                }
                Err(e) => return Err(e),
            }
        }
    }
    if let Some(g) = reg_grad {
        out.value = ce_value + cfg.lambda * reg;
        out.grad_z.axpy(cfg.lambda, &g)?;
    }
    Ok(out)
}
