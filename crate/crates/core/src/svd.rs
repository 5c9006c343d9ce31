//! Singular value decomposition and the subspace quantities built on it.
//!
//! The decomposition is a one-sided Jacobi (Hestenes) iteration: plane
//! rotations orthogonalize column pairs of a working copy until every pair is
//! numerically orthogonal, after which singular values are column norms and
//! the right factor is the accumulated rotation product. The method is
//! dependency-free, accurate to machine precision for the small dense
//! matrices this crate works with, and — together with a fixed sweep order,
//! a descending stable sort, and a sign convention — bit-deterministic for a
//! given input.

use crate::error::{Error, Result};
use crate::mat::{dot, norm, Mat};

/// Convergence threshold for a column pair: the pair is orthogonal when
/// `|<wi, wj>|^2 <= REL_TOL^2 * |wi|^2 |wj|^2`.
const JACOBI_REL_TOL_SQ: f64 = 1e-28;

/// Sweep budget per column as required by the convergence contract.
const MAX_SWEEPS_PER_COL: usize = 100;

/// Thin SVD `M = U diag(sigma) V^T` with `r = min(rows, cols)` columns.
///
/// Invariants (enforced by construction, checked in tests):
/// * `sigma` is non-negative and non-increasing,
/// * `U` (`rows x r`) and `V` (`cols x r`) have orthonormal columns even when
///   `M` is rank-deficient — missing directions are completed
///   deterministically,
/// * the largest-magnitude entry of every column of `U` is non-negative
///   (ties broken by lowest row index), with the matching `V` column flipped
///   in tandem so the product is unchanged.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

impl SvdResult {
    /// Reconstructs `U diag(sigma) V^T`; used by tests and callers that need
    /// the implied low-rank approximation.
    pub fn reconstruct(&self) -> Result<Mat> {
        let scaled = Mat::from_fn(self.u.rows(), self.sigma.len(), |i, j| {
            self.u.get(i, j) * self.sigma[j]
        });
        scaled.matmul(&self.v.transpose())
    }

    /// Number of singular values strictly above the relative rank threshold.
    pub fn rank(&self, rows: usize, cols: usize, rel_tol: f64) -> usize {
        let thr = rank_cutoff(&self.sigma, rows, cols, rel_tol);
        self.sigma.iter().filter(|&&s| s > thr).count()
    }
}

/// Rank cutoff `rel_tol * sigma_max * max(rows, cols)`.
fn rank_cutoff(sigma: &[f64], rows: usize, cols: usize, rel_tol: f64) -> f64 {
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    rel_tol * sigma_max * rows.max(cols) as f64
}

/// Full thin SVD of `m`.
///
/// Errors: [`Error::InvalidArgument`] for an empty matrix,
/// [`Error::NonFinite`] if an entry is NaN/infinite, and
/// [`Error::SvdConvergence`] if the sweep budget is exhausted (not observed
/// in practice; the budget is 100 sweeps per column).
pub fn svd(m: &Mat) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidArgument(format!(
            "SVD of an empty {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(format!(
            "SVD input ({}x{}) contains NaN or infinity",
            m.rows(),
            m.cols()
        )));
    }
    let mut dec = if m.rows() >= m.cols() {
        svd_tall(m)?
    } else {
        // Work on the transpose and swap the factors back.
        let t = svd_tall(&m.transpose())?;
        SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    };
    // The convention is defined on the final left factor, so it must run
    // after the wide-case swap.
    apply_sign_convention(&mut dec.u, &mut dec.v);
    Ok(dec)
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn svd_tall(a: &Mat) -> Result<SvdResult> {
    let n = a.cols();
    let mut w = a.clone();
    let mut v = Mat::identity(n);
    let max_sweeps = MAX_SWEEPS_PER_COL * n;

    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in (i + 1)..n {
                if rotate_pair(&mut w, &mut v, i, j) {
                    rotated = true;
                }
            }
        }
        if !rotated {
            break;
        }
        sweeps += 1;
        if sweeps >= max_sweeps {
            return Err(Error::SvdConvergence {
                rows: a.rows(),
                cols: a.cols(),
                sweeps,
                worst_cosine: worst_pair_cosine(&w),
            });
        }
    }

    finalize(a, w, v)
}

/// Applies one Jacobi rotation to columns `i < j` of `w` (and `v`) if the
/// pair is not yet orthogonal. Returns whether a rotation happened.
fn rotate_pair(w: &mut Mat, v: &mut Mat, i: usize, j: usize) -> bool {
    let (aii, ajj, aij) = {
        let wi = w.col(i);
        let wj = w.col(j);
        (dot(wi, wi), dot(wj, wj), dot(wi, wj))
    };
    if aij == 0.0 || aij * aij <= JACOBI_REL_TOL_SQ * aii * ajj {
        return false;
    }
    // Closed-form rotation that zeroes <wi, wj>: with zeta = (ajj - aii) /
    // (2 aij), tan(theta) is the smaller root of t^2 + 2 zeta t - 1 = 0.
    let zeta = (ajj - aii) / (2.0 * aij);
    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
    if t == 0.0 {
        // zeta overflowed; the implied rotation is below resolution.
        return false;
    }
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = c * t;
    rotate_cols(w, i, j, c, s);
    rotate_cols(v, i, j, c, s);
    true
}

/// In-place rotation of columns `i` and `j` by `[[c, s], [-s, c]]`.
fn rotate_cols(m: &mut Mat, i: usize, j: usize, c: f64, s: f64) {
    let rows = m.rows();
    for r in 0..rows {
        let a = m.get(r, i);
        let b = m.get(r, j);
        m.set(r, i, c * a - s * b);
        m.set(r, j, s * a + c * b);
    }
}

/// Largest |cos| over column pairs; reported when convergence fails.
fn worst_pair_cosine(w: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..w.cols() {
        for j in (i + 1)..w.cols() {
            let (wi, wj) = (w.col(i), w.col(j));
            let denom = norm(wi) * norm(wj);
            if denom > 0.0 {
                worst = worst.max(dot(wi, wj).abs() / denom);
            }
        }
    }
    worst
}

/// Extracts singular values and factors from the rotated columns: sorts
/// descending, completes the left basis for zero directions, and applies the
/// sign convention.
fn finalize(a: &Mat, w: Mat, v: Mat) -> Result<SvdResult> {
    let (rows, n) = (a.rows(), a.cols());

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| norm(w.col(j))).collect();
    // Stable sort keeps the Jacobi output order among exact ties.
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let mut sigma = Vec::with_capacity(n);
    let mut u = Mat::zeros(rows, n);
    let mut v_sorted = Mat::zeros(n, n);
    let mut zero_cols = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(norms[src]);
        v_sorted.col_mut(dst).copy_from_slice(v.col(src));
        if norms[src] > 0.0 {
            let inv = 1.0 / norms[src];
            for (out, &x) in u.col_mut(dst).iter_mut().zip(w.col(src)) {
                *out = x * inv;
            }
        } else {
            zero_cols.push(dst);
        }
    }

    complete_basis(&mut u, &zero_cols);

    Ok(SvdResult {
        u,
        sigma,
        v: v_sorted,
    })
}

/// Fills the listed (currently zero) columns of `u` with unit vectors
/// orthogonal to every other column. Candidates are standard basis vectors;
/// the one with the largest residual after projection wins, which is
/// deterministic and always well-conditioned.
fn complete_basis(u: &mut Mat, zero_cols: &[usize]) {
    let rows = u.rows();
    for &jz in zero_cols {
        let filled: Vec<usize> = (0..u.cols()).filter(|&j| j != jz).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..rows {
            let mut cand = vec![0.0; rows];
            cand[k] = 1.0;
            // Two projection passes keep the residual orthogonal to working
            // precision even when the first pass cancels heavily.
            for _ in 0..2 {
                for &j in &filled {
                    let col = u.col(j);
                    let coeff = dot(&cand, col);
                    for (c, &b) in cand.iter_mut().zip(col) {
                        *c -= coeff * b;
                    }
                }
            }
            let len = norm(&cand);
            if best.as_ref().map_or(true, |(l, _)| len > *l) {
                best = Some((len, cand));
            }
        }
        let (len, mut cand) = best.expect("rows >= 1 guarantees a candidate");
        debug_assert!(len > 0.0, "basis completion found no free direction");
        for c in cand.iter_mut() {
            *c /= len;
        }
        u.col_mut(jz).copy_from_slice(&cand);
    }
}

/// Makes the largest-magnitude entry of each `u` column non-negative,
/// flipping the paired `v` column so the reconstruction is unchanged.
fn apply_sign_convention(u: &mut Mat, v: &mut Mat) {
    for j in 0..u.cols() {
        let col = u.col(j);
        let mut pivot = 0usize;
        for (i, &x) in col.iter().enumerate() {
            if x.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            for x in u.col_mut(j) {
                *x = -*x;
            }
            for x in v.col_mut(j) {
                *x = -*x;
            }
        }
    }
}

/// Nuclear norm: the sum of singular values.
pub fn nuclear_norm(m: &Mat) -> Result<f64> {
    Ok(svd(m)?.sigma.iter().sum())
}

/// Spectral norm: the largest singular value.
pub fn spectral_norm(m: &Mat) -> Result<f64> {
    Ok(svd(m)?.sigma.first().copied().unwrap_or(0.0))
}

/// Numerical rank: singular values strictly above
/// `rel_tol * sigma_max * max(rows, cols)`. The all-zero matrix has rank 0.
pub fn numerical_rank(m: &Mat, rel_tol: f64) -> Result<usize> {
    Ok(svd(m)?.rank(m.rows(), m.cols(), rel_tol))
}

/// Orthonormal basis of the column space: the left singular vectors whose
/// singular values clear the rank threshold. The zero matrix yields a
/// `rows x 0` matrix.
pub fn orthonormal_basis(m: &Mat, rel_tol: f64) -> Result<Mat> {
    let dec = svd(m)?;
    let r = dec.rank(m.rows(), m.cols(), rel_tol);
    dec.u.select_cols(&(0..r).collect::<Vec<_>>())
}

/// Largest tolerated deviation of `B^T B` from the identity for principal
/// angle inputs.
const BASIS_ORTHONORMALITY_TOL: f64 = 1e-6;

/// Principal angle cosines between the column spans of two orthonormal
/// bases with a common ambient dimension, non-increasing, clamped to
/// `[0, 1 + 1e-10]`. Returns one cosine per dimension of the smaller basis;
/// empty bases give an empty vector.
pub fn principal_angle_cosines(a: &Mat, b: &Mat) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "principal angles between bases with {} and {} rows",
            a.rows(),
            b.rows()
        )));
    }
    check_orthonormal(a, "first")?;
    check_orthonormal(b, "second")?;
    if a.cols() == 0 || b.cols() == 0 {
        return Ok(Vec::new());
    }
    let cross = a.transpose().matmul(b)?;
    let mut cos = svd(&cross)?.sigma;
    for c in cos.iter_mut() {
        *c = c.clamp(0.0, 1.0 + 1e-10);
    }
    Ok(cos)
}

fn check_orthonormal(basis: &Mat, which: &str) -> Result<()> {
    let gram = basis.transpose().matmul(basis)?;
    let dev = gram.sub(&Mat::identity(basis.cols()))?.max_abs();
    if dev > BASIS_ORTHONORMALITY_TOL {
        return Err(Error::InvalidArgument(format!(
            "{which} principal-angle input is not orthonormal \
             (max |B^T B - I| = {dev:.3e})"
        )));
    }
    Ok(())
}
