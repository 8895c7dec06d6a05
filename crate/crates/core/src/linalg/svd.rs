//! One-sided Jacobi singular value decomposition.
//!
//! Columns of a working copy of the matrix are rotated pairwise until every
//! pair is orthogonal to a cosine of `1e-12`; the column norms are then the
//! singular values and the accumulated rotations form `V`. Sizes here are
//! small (at most a few dozen per side) so the O(n³) sweep is fine.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 60;
const PAIR_COSINE_TOL: f64 = 1e-12;

/// Thin SVD `m ≈ u · diag(s) · vt` holding the top `k` triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    /// `k × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, &s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul(&self.vt)
    }
}

/// Top-`k` singular triplets of `m`, `1 ≤ k ≤ min(rows, cols)`.
pub fn svd_truncated(m: &Matrix, k: usize) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    let min_dim = rows.min(cols);
    if k == 0 || k > min_dim {
        return Err(Error::config(format!(
            "svd rank k={k} must be in 1..={min_dim} for a {rows}x{cols} matrix"
        )));
    }
    if rows < cols {
        let t = svd_truncated(&m.transpose(), k)?;
        return Ok(SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }
    let full = jacobi(m)?;
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| full.sigma[b].total_cmp(&full.sigma[a]).then(a.cmp(&b)));
    order.truncate(k);

    let sigma_max = order.first().map_or(0.0, |&j| full.sigma[j]);
    let null_tol = sigma_max * (rows as f64) * f64::EPSILON;

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
    let mut s = Vec::with_capacity(k);
    let mut vt = Matrix::zeros(k, cols);
    for (out, &j) in order.iter().enumerate() {
        let sigma = full.sigma[j];
        vt.row_mut(out).copy_from_slice(&full.v_cols[j]);
        if sigma > null_tol && sigma > 0.0 {
            u_cols.push(Some(full.work[j].iter().map(|v| v / sigma).collect()));
            s.push(sigma);
        } else {
            u_cols.push(None);
            s.push(if sigma > 0.0 { sigma } else { 0.0 });
        }
    }
    let u_cols = complete_orthonormal(u_cols, rows);
    let mut u = Matrix::zeros(rows, k);
    for (j, c) in u_cols.iter().enumerate() {
        u.set_col(j, c);
    }
    Ok(SvdResult { u, s, vt })
}

/// All `min(rows, cols)` singular values, descending.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    let k = m.rows().min(m.cols());
    if k == 0 {
        return Ok(Vec::new());
    }
    Ok(svd_truncated(m, k)?.s)
}

/// Number of singular values above `rel_tol · σ_max`; zero for the zero matrix.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    let s = singular_values(m)?;
    let max = s.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > rel_tol * max).count())
}

struct Jacobi {
    /// Rotated columns of the input, stored as rows for contiguous access.
    work: Vec<Vec<f64>>,
    v_cols: Vec<Vec<f64>>,
    sigma: Vec<f64>,
}

fn jacobi(m: &Matrix) -> Result<Jacobi> {
    let (rows, cols) = m.shape();
    if !m.is_finite() {
        return Err(Error::SvdNoConvergence {
            sweeps: 0,
            off_diagonal: f64::NAN,
        });
    }
    let mut work: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    let mut v_cols: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = cols < 2;
    let mut worst = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        worst = 0.0f64;
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let a = dot(&work[p], &work[p]);
                let b = dot(&work[q], &work[q]);
                let d = dot(&work[p], &work[q]);
                let scale = (a * b).sqrt();
                if scale == 0.0 || d.is_nan() || d.abs() <= PAIR_COSINE_TOL * scale {
                    continue;
                }
                worst = worst.max(d.abs() / scale);
                rotated = true;
                let zeta = (b - a) / (2.0 * d);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut v_cols, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            off_diagonal: worst,
        });
    }
    debug_assert_eq!(work[0].len(), rows);
    let sigma = work.iter().map(|c| dot(c, c).sqrt()).collect();
    Ok(Jacobi { work, v_cols, sigma })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column,
/// drawn from the standard basis by modified Gram–Schmidt.
fn complete_orthonormal(cols: Vec<Option<Vec<f64>>>, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(cols.len());
    for c in cols {
        match c {
            Some(v) => out.push(v),
            None => {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for e in 0..dim {
                    let mut v = vec![0.0; dim];
                    v[e] = 1.0;
                    for _ in 0..2 {
                        for b in &basis {
                            let proj = dot(&v, b);
                            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                        }
                    }
                    let n = dot(&v, &v).sqrt();
                    if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                        best = Some((n, v));
                    }
                }
                let (n, mut v) = best.expect("dim > 0");
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v.clone());
                out.push(v);
            }
        }
    }
    out
}
