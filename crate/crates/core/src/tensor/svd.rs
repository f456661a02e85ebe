//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of the (possibly transposed, so that rows ≥ cols) input are
//! orthogonalised pairwise in a fixed cyclic order. The column norms at
//! convergence are the singular values, the normalised columns the left
//! singular vectors, and the accumulated rotations the right ones.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Maximum number of cyclic sweeps before giving up.
pub const SVD_SWEEP_BUDGET: usize = 60;
/// Convergence when the off-diagonal Gram mass drops below this times ‖W‖_F².
pub const SVD_TOLERANCE: f64 = 1e-14;

/// `w = u · diag(sigma) · vt` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `k × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_cols(&self.sigma)
            .matmul(&self.vt)
            .expect("factor shapes are consistent")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Jacobi {
    /// Working columns of A (each of length m).
    cols: Vec<Vec<f64>>,
    /// Columns of V (each of length n).
    v: Vec<Vec<f64>>,
}

/// Runs Jacobi on a tall matrix (`rows ≥ cols`) given column-major.
fn jacobi_tall(cols: Vec<Vec<f64>>, fro_sq: f64) -> Result<Jacobi> {
    let n = cols.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut cols = cols;
    let threshold = SVD_TOLERANCE * fro_sq;
    let mut residual = 0.0;

    for _sweep in 0..SVD_SWEEP_BUDGET {
        let mut off_mass_sq = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                off_mass_sq += gamma * gamma;
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        residual = off_mass_sq.sqrt();
        if residual <= threshold {
            return Ok(Jacobi { cols, v });
        }
    }

    // The last sweep may still have finished the job; measure once more.
    let mut off_mass_sq = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            let g = dot(&cols[p], &cols[q]);
            off_mass_sq += g * g;
        }
    }
    if off_mass_sq.sqrt() <= threshold {
        return Ok(Jacobi { cols, v });
    }
    residual = residual.min(off_mass_sq.sqrt());
    Err(Error::NoConvergence {
        sweeps: SVD_SWEEP_BUDGET,
        residual,
    })
}

fn rotate(vs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vs.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Builds orthonormal left vectors; columns with negligible norm are replaced
/// by unit vectors orthogonal to everything accepted so far.
fn orthonormal_left(cols: &[Vec<f64>], sigma: &[f64], m: usize) -> Vec<Vec<f64>> {
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let cutoff = smax * (m.max(cols.len()) as f64) * f64::EPSILON;
    let mut out: Vec<Option<Vec<f64>>> = cols
        .iter()
        .zip(sigma)
        .map(|(c, &s)| {
            if s > cutoff && s > 0.0 {
                Some(c.iter().map(|x| x / s).collect())
            } else {
                None
            }
        })
        .collect();

    let mut candidate = 0;
    for j in 0..out.len() {
        if out[j].is_some() {
            continue;
        }
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes for numerical orthogonality.
            for _ in 0..2 {
                for u in out.iter().flatten() {
                    let d = dot(&e, u);
                    for (ei, ui) in e.iter_mut().zip(u) {
                        *ei -= d * ui;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-3 {
                e.iter_mut().for_each(|x| *x /= norm);
                out[j] = Some(e);
                break;
            }
        }
    }
    out.into_iter()
        .map(|c| c.expect("basis completion always succeeds for k ≤ m"))
        .collect()
}

/// Thin SVD of `w`.
///
/// Deterministic: fixed cyclic sweep order, descending singular values with
/// ties kept in original column order, and each left singular vector signed
/// so that its largest-magnitude element is positive.
pub fn thin_svd(w: &Matrix) -> Result<SvdFactors> {
    if !w.is_finite() {
        return Err(Error::InvalidMatrix("svd input has non-finite entries".into()));
    }
    let transposed = w.rows() < w.cols();
    let a = if transposed { w.transpose() } else { w.clone() };
    let (m, n) = a.shape();
    let fro_sq: f64 = a.as_slice().iter().map(|x| x * x).sum();

    let cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let Jacobi { cols, v } = jacobi_tall(cols, fro_sq)?;

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: equal values keep ascending column index.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sorted_cols: Vec<Vec<f64>> = order.iter().map(|&j| cols[j].clone()).collect();
    let mut left = orthonormal_left(&sorted_cols, &sigma, m);
    let mut right: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();

    // For the transposed problem, the roles of left/right swap; the sign rule
    // is applied to whichever ends up as the caller's left vectors.
    let (caller_left, caller_right) = if transposed {
        (&mut right, &mut left)
    } else {
        (&mut left, &mut right)
    };
    for (l, r) in caller_left.iter_mut().zip(caller_right.iter_mut()) {
        let mut idx = 0;
        for (i, x) in l.iter().enumerate() {
            if x.abs() > l[idx].abs() {
                idx = i;
            }
        }
        if l[idx] < 0.0 {
            l.iter_mut().for_each(|x| *x = -*x);
            r.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let k = n;
    let (u_cols, v_cols, rows_out, cols_out) = if transposed {
        (right, left, w.rows(), w.cols())
    } else {
        (left, right, w.rows(), w.cols())
    };
    let u = Matrix::from_fn(rows_out, k, |i, j| u_cols[j][i]);
    let vt = Matrix::from_fn(k, cols_out, |i, j| v_cols[i][j]);
    Ok(SvdFactors { u, sigma, vt })
}

/// Rank-`r` balanced split: `wa = U_r·diag(√σ)`, `wb = diag(√σ)·V_rᵀ`.
pub fn truncate_factors(f: &SvdFactors, r: usize) -> Result<(Matrix, Matrix)> {
    let k = f.rank_capacity();
    if r > k {
        return Err(Error::RankOutOfRange {
            rank: r,
            max: k,
            layer: None,
        });
    }
    let root: Vec<f64> = f.sigma[..r].iter().map(|s| s.sqrt()).collect();
    let wa = Matrix::from_fn(f.u.rows(), r, |i, j| f.u[(i, j)] * root[j]);
    let wb = Matrix::from_fn(r, f.vt.cols(), |i, j| root[i] * f.vt[(i, j)]);
    Ok((wa, wb))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(0.0);
    }
    Ok(thin_svd(m)?.sigma[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn orthonormality_residual(cols_as_rows: &Matrix) -> f64 {
        // max |G − I| for G = M·Mᵀ
        let g = cols_as_rows.matmul_t(cols_as_rows).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    fn check_invariants(w: &Matrix) {
        let f = thin_svd(w).unwrap();
        let k = w.rows().min(w.cols());
        assert_eq!(f.sigma.len(), k);
        assert_eq!(f.u.shape(), (w.rows(), k));
        assert_eq!(f.vt.shape(), (k, w.cols()));
        assert!(f.sigma.windows(2).all(|p| p[0] >= p[1]));
        assert!(f.sigma.iter().all(|&s| s >= 0.0));
        assert!(orthonormality_residual(&f.u.transpose()) < 1e-9);
        assert!(orthonormality_residual(&f.vt) < 1e-9);
        let err = frobenius_norm(&f.reconstruct().sub(w).unwrap());
        let scale = frobenius_norm(w).max(f64::MIN_POSITIVE);
        assert!(err / scale < 1e-8 || err < 1e-300, "reconstruction {err}");
        for j in 0..k {
            let col = f.u.column(j);
            let big = col.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big >= 0.0);
        }
    }

    #[test]
    fn diagonal_matrix() {
        let f = thin_svd(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
        for (s, e) in f.sigma.iter().zip([3.0, 2.0, 1.0]) {
            assert!((s - e).abs() < 1e-14);
        }
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let f = thin_svd(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn orthogonal_matrix_has_unit_spectrum() {
        let mut rng = Rng::new(4);
        let q = thin_svd(&Matrix::randn(6, 6, 1.0, &mut rng)).unwrap().u;
        let f = thin_svd(&q).unwrap();
        assert!(f.sigma.iter().all(|s| (s - 1.0).abs() < 1e-10));
    }

    #[test]
    fn shapes_and_invariants() {
        let mut rng = Rng::new(8);
        for (m, n) in [(8, 5), (5, 8), (1, 7), (7, 1), (12, 12), (30, 17)] {
            check_invariants(&Matrix::randn(m, n, 1.0, &mut rng));
        }
    }

    #[test]
    fn rank_deficient_and_zero() {
        check_invariants(&Matrix::zeros(4, 3));
        let mut rng = Rng::new(2);
        let a = Matrix::randn(9, 2, 1.0, &mut rng);
        let b = Matrix::randn(2, 6, 1.0, &mut rng);
        check_invariants(&a.matmul(&b).unwrap());
        check_invariants(&Matrix::filled(3, 3, 1.0));
    }

    #[test]
    fn deterministic() {
        let mut rng = Rng::new(21);
        let w = Matrix::randn(10, 7, 1.0, &mut rng);
        let a = thin_svd(&w).unwrap();
        let b = thin_svd(&w).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.vt, b.vt);
        assert_eq!(a.sigma, b.sigma);
    }

    #[test]
    fn truncation_edges() {
        let mut rng = Rng::new(5);
        let w = Matrix::randn(10, 6, 1.0, &mut rng);
        let f = thin_svd(&w).unwrap();
        let (wa, wb) = truncate_factors(&f, 6).unwrap();
        let rel = frobenius_norm(&wa.matmul(&wb).unwrap().sub(&w).unwrap()) / frobenius_norm(&w);
        assert!(rel < 1e-10);

        let (wa, wb) = truncate_factors(&f, 0).unwrap();
        assert_eq!(wa.shape(), (10, 0));
        assert_eq!(wb.shape(), (0, 6));
        assert_eq!(wa.matmul(&wb).unwrap(), Matrix::zeros(10, 6));

        let (wa, wb) = truncate_factors(&f, 3).unwrap();
        let err = frobenius_norm(&wa.matmul(&wb).unwrap().sub(&w).unwrap());
        let tail = f.sigma[3..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((err - tail).abs() / tail < 1e-9);

        assert!(matches!(
            truncate_factors(&f, 7),
            Err(Error::RankOutOfRange { rank: 7, max: 6, .. })
        ));
    }

    #[test]
    fn norms_of_simple_matrices() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(spectral_norm(&Matrix::zeros(3, 3)).unwrap(), 0.0);
        let d = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        assert!((spectral_norm(&d).unwrap() - 3.0).abs() < 1e-14);
        assert!((frobenius_norm(&d) - 14f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Matrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(thin_svd(&m).is_err());
    }
}
