//! Seeded corruption of supervision.
//!
//! Every operation corrupts an exact number of samples (`round(ratio * N)`)
//! chosen by a full seeded shuffle of the eligible indices, so for a fixed
//! seed the corrupted set at a smaller ratio is a prefix of the set at a
//! larger ratio.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("cannot corrupt labels: {0}")]
    CannotFlip(String),
    #[error("noise ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    PairSwap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Fraction of eligible samples to corrupt.
    pub ratio: f64,
    /// Classes eligible for asymmetric noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn symmetric(ratio: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            ratio,
            subset: None,
            seed,
        }
    }

    pub fn asymmetric(ratio: f64, subset: Vec<usize>, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Asymmetric,
            ratio,
            subset: Some(subset),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        check_ratio(self.ratio)?;
        if self.kind == NoiseKind::Asymmetric && self.subset.as_ref().is_none_or(Vec::is_empty) {
            return Err(NoiseError::CannotFlip(
                "asymmetric noise needs a nonempty class subset".into(),
            ));
        }
        Ok(())
    }

    /// Applies the corruption to `labels`. Pair swapping permutes the labels
    /// as if each label were the paired description of its sample.
    pub fn apply(&self, labels: &[usize], num_classes: usize) -> Result<Corrupted, NoiseError> {
        self.validate()?;
        match self.kind {
            NoiseKind::Symmetric => flip_symmetric(labels, num_classes, self.ratio, self.seed),
            NoiseKind::Asymmetric => flip_asymmetric(
                labels,
                num_classes,
                self.ratio,
                self.subset.as_deref().unwrap_or(&[]),
                self.seed,
            ),
            NoiseKind::PairSwap => {
                check_labels(labels, num_classes)?;
                let perm = swap_pairs(labels.len(), self.ratio, self.seed)?;
                let new: Vec<usize> = perm.iter().map(|&j| labels[j]).collect();
                let mask = perm.iter().enumerate().map(|(i, &j)| i != j).collect();
                Ok(Corrupted { labels: new, mask })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corrupted {
    pub labels: Vec<usize>,
    /// `true` where the sample was corrupted.
    pub mask: Vec<bool>,
}

impl Corrupted {
    pub fn corrupted_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn check_ratio(ratio: f64) -> Result<(), NoiseError> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(NoiseError::BadRatio(ratio))
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), NoiseError> {
    match labels.iter().position(|&l| l >= classes) {
        Some(index) => Err(NoiseError::Label {
            index,
            label: labels[index],
            classes,
        }),
        None => Ok(()),
    }
}

/// Number of samples corrupted out of `n` eligible: `round(ratio * n)`.
pub fn corrupted_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

/// Replaces `round(gamma * N)` uniformly chosen labels with a uniform draw
/// over the other `C - 1` classes.
pub fn flip_symmetric(
    labels: &[usize],
    num_classes: usize,
    gamma: f64,
    seed: u64,
) -> Result<Corrupted, NoiseError> {
    let all: Vec<usize> = (0..num_classes).collect();
    flip_within(labels, num_classes, gamma, &all, seed)
}

/// Like [`flip_symmetric`] but only samples whose label is in `subset` are
/// eligible, and they flip to another class of `subset`.
pub fn flip_asymmetric(
    labels: &[usize],
    num_classes: usize,
    gamma: f64,
    subset: &[usize],
    seed: u64,
) -> Result<Corrupted, NoiseError> {
    if let Some(&bad) = subset.iter().find(|&&c| c >= num_classes) {
        return Err(NoiseError::CannotFlip(format!(
            "subset class {bad} outside [0, {num_classes})"
        )));
    }
    let mut classes = subset.to_vec();
    classes.sort_unstable();
    classes.dedup();
    flip_within(labels, num_classes, gamma, &classes, seed)
}

fn flip_within(
    labels: &[usize],
    num_classes: usize,
    gamma: f64,
    classes: &[usize],
    seed: u64,
) -> Result<Corrupted, NoiseError> {
    check_ratio(gamma)?;
    check_labels(labels, num_classes)?;
    let mut out = Corrupted {
        labels: labels.to_vec(),
        mask: vec![false; labels.len()],
    };
    if gamma == 0.0 {
        return Ok(out);
    }
    if classes.len() < 2 {
        return Err(NoiseError::CannotFlip(format!(
            "need at least 2 classes to flip between, have {}",
            classes.len()
        )));
    }
    let mut eligible: Vec<usize> = (0..labels.len())
        .filter(|&i| classes.binary_search(&labels[i]).is_ok())
        .collect();
    let k = corrupted_count(gamma, eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    for &i in &eligible[..k] {
        let own = classes.binary_search(&labels[i]).expect("eligible");
        let mut pick = rng.random_range(0..classes.len() - 1);
        if pick >= own {
            pick += 1;
        }
        out.labels[i] = classes[pick];
        out.mask[i] = true;
    }
    Ok(out)
}

/// Permutation of `[0, pair_count)` made of disjoint transpositions that
/// moves the even count closest to `gamma * N` (ties round up, capped at N).
/// `perm[i]` is the index whose description sample `i` receives.
pub fn swap_pairs(pair_count: usize, gamma: f64, seed: u64) -> Result<Vec<usize>, NoiseError> {
    check_ratio(gamma)?;
    let mut perm: Vec<usize> = (0..pair_count).collect();
    if gamma == 0.0 {
        return Ok(perm);
    }
    if pair_count < 2 {
        return Err(NoiseError::CannotFlip(format!(
            "need at least 2 pairs to swap, have {pair_count}"
        )));
    }
    let moved = swapped_count(gamma, pair_count);
    let mut idx: Vec<usize> = (0..pair_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    for pair in idx[..moved].chunks_exact(2) {
        perm.swap(pair[0], pair[1]);
    }
    Ok(perm)
}

/// Even number of moved pairs for [`swap_pairs`].
pub fn swapped_count(gamma: f64, n: usize) -> usize {
    let half = (gamma * n as f64 / 2.0).round() as usize;
    (2 * half).min(n - n % 2)
}
