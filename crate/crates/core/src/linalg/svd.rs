//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of the working copy are rotated pairwise until every pair is
//! orthogonal to within `rows * EPSILON` relative to the column norms. The
//! column norms are then the singular values, the normalized columns the left
//! singular vectors, and the accumulated rotations the right singular vectors.
//! Everything runs sequentially in a fixed pair order, so the output only
//! depends on the input bits.

use super::{dot, LinalgError, Matrix};

/// Singular values below this fraction of the largest one are set to zero.
pub const SIGMA_CLAMP_RELATIVE: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `F = U * diag(sigma) * Vt` with `r = min(M, D)` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `M x r`, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative.
    pub sigma: Vec<f64>,
    /// `r x D`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.iter().filter(|&&s| s > 0.0).count()
    }

    /// `U * diag(sigma) * Vt`
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (v, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *v *= s;
            }
        }
        us.matmul(&self.vt).expect("svd factors have matching shapes")
    }
}

pub fn svd(f: &Matrix) -> Result<SvdResult, LinalgError> {
    f.check_finite()?;
    if f.rows() == 0 || f.cols() == 0 {
        return Err(LinalgError::Shape(format!(
            "svd of empty {}x{} matrix",
            f.rows(),
            f.cols()
        )));
    }
    if f.rows() >= f.cols() {
        Ok(svd_tall(f))
    } else {
        let t = svd_tall(&f.transpose());
        Ok(SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        })
    }
}

fn svd_tall(f: &Matrix) -> SvdResult {
    let (m, n) = f.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| f.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = (m as f64) * f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= tol * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort: equal singular values keep their column order
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let top = norms[order[0]];
    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        if s > 0.0 && s >= SIGMA_CLAMP_RELATIVE * top {
            sigma.push(s);
            u_cols.push(Some(cols[j].iter().map(|v| v / s).collect()));
        } else {
            sigma.push(0.0);
            u_cols.push(None);
        }
    }
    let u_cols = complete_basis(m, u_cols);

    let mut u = Matrix::zeros(m, n);
    for (j, col) in u_cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            u.set(i, j, v);
        }
    }
    let mut vt = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        vt.row_mut(k).copy_from_slice(&vcols[j]);
    }
    SvdResult { u, sigma, vt }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the missing columns (zero singular values) with unit vectors
/// orthogonal to everything already present, drawn from the standard basis
/// by Gram-Schmidt with reorthogonalization.
fn complete_basis(m: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0usize;
    let mut out = Vec::with_capacity(cols.len());
    let mut known = cols.iter().flatten();
    for slot in &cols {
        match slot {
            Some(_) => out.push(known.next().cloned().expect("present column")),
            None => loop {
                assert!(candidate < m, "basis completion ran out of candidates");
                let mut e = vec![0.0; m];
                e[candidate] = 1.0;
                candidate += 1;
                for _ in 0..2 {
                    for d in &done {
                        let proj = dot(&e, d);
                        e.iter_mut().zip(d).for_each(|(x, y)| *x -= proj * y);
                    }
                }
                let norm = dot(&e, &e).sqrt();
                if norm > 1e-3 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    done.push(e.clone());
                    out.push(e);
                    break;
                }
            },
        }
    }
    out
}
