//! Singular-value spectrum diagnostics of a feature matrix.
//!
//! Both metrics are computed on the spectrum normalized to a probability
//! distribution `p_i = sigma_i / sum_j sigma_j`, in nats:
//!
//! * singular value entropy `SVE = -sum p_i ln p_i` measures how flat the
//!   spectrum is (how many directions the features span);
//! * largest singular value ratio `LSVR = -ln p_1` measures how little of the
//!   spectrum the dominant direction carries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{svd, FeatureMatrix, LinalgError};

pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("spectrum has no positive singular value")]
    ZeroSpectrum,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Singular value entropy of a non-negative spectrum.
pub fn sve(sigma: &[f64]) -> Result<f64, SpectrumError> {
    let total = positive_total(sigma)?;
    let h = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum::<f64>();
    // a single-mass spectrum gives -1 * ln 1 = -0.0
    Ok(h.max(0.0))
}

/// Largest singular value ratio `-ln(sigma_max / sum sigma)`.
pub fn lsvr(sigma: &[f64]) -> Result<f64, SpectrumError> {
    let total = positive_total(sigma)?;
    let top = sigma.iter().cloned().fold(0.0, f64::max);
    Ok((-(top / total).ln()).max(0.0))
}

fn positive_total(sigma: &[f64]) -> Result<f64, SpectrumError> {
    let total: f64 = sigma.iter().filter(|&&s| s > 0.0).sum();
    if total > 0.0 && total.is_finite() {
        Ok(total)
    } else {
        Err(SpectrumError::ZeroSpectrum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub top_k: usize,
    /// Subtract column means before the SVD. Off by default: the metrics are
    /// defined on the raw features.
    pub center: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            center: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub dataset_id: String,
    pub model_id: String,
    /// Which split the features came from.
    pub split: String,
    pub m: usize,
    pub d: usize,
    pub centered: bool,
    pub sve: f64,
    pub lsvr: f64,
    pub sigma_top: Vec<f64>,
    pub total_sigma: f64,
    /// Number of nonzero singular values.
    pub rank: usize,
    pub log_base: String,
    /// Multiply `sve`/`lsvr` by this to get bits.
    pub nats_to_bits: f64,
}

pub fn analyze(
    f: &FeatureMatrix,
    dataset_id: &str,
    model_id: &str,
    opts: AnalyzeOptions,
) -> Result<SpectrumReport, SpectrumError> {
    let centered;
    let input = if opts.center {
        centered = f.centered();
        &centered
    } else {
        f
    };
    let dec = svd(input)?;
    let sigma = dec.sigma;
    Ok(SpectrumReport {
        dataset_id: dataset_id.to_string(),
        model_id: model_id.to_string(),
        split: "eval".to_string(),
        m: f.rows(),
        d: f.cols(),
        centered: opts.center,
        sve: sve(&sigma)?,
        lsvr: lsvr(&sigma)?,
        sigma_top: sigma.iter().take(opts.top_k).cloned().collect(),
        total_sigma: sigma.iter().sum(),
        rank: sigma.iter().filter(|&&s| s > 0.0).count(),
        log_base: "e".to_string(),
        nats_to_bits: std::f64::consts::LOG2_E,
    })
}
