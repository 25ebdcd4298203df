//! Dense factorizations used by the penalized solver and inference.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative pivot threshold for the pivoted Cholesky factorization.
pub const PIVOT_TOL: f64 = 1e-10;

/// Cholesky factorization with diagonal pivoting of a symmetric positive
/// semi-definite matrix, truncated at the numerical rank. The matrix is first
/// equilibrated to unit diagonal, `A_s = D A D`, and `P^T A_s P ~= L L^T`
/// with `L` of size `n x rank`.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    n: usize,
    rank: usize,
    /// `perm[k]` is the original index placed at position `k`.
    perm: Vec<usize>,
    /// Leading `rank x rank` lower-triangular block of the factor.
    l11: DMatrix<f64>,
    /// Diagonal of `D`.
    scale: DVector<f64>,
}

impl PivotedCholesky {
    pub fn factor(a: &DMatrix<f64>, rel_tol: f64) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "pivoted Cholesky needs a square matrix");
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let scale = DVector::from_fn(n, |i, _| if a[(i, i)] > 0.0 { a[(i, i)].sqrt().recip() } else { 1.0 });
        let mut w = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rank = n;
        let mut max_pivot = 0.0;
        for k in 0..n {
            let mut best = k;
            for j in k + 1..n {
                if w[(j, j)] > w[(best, best)] {
                    best = j;
                }
            }
            let pivot = w[(best, best)];
            if k == 0 {
                max_pivot = pivot;
            }
            if !(pivot > rel_tol * max_pivot) || pivot <= 0.0 {
                rank = k;
                break;
            }
            if best != k {
                w.swap_rows(k, best);
                w.swap_columns(k, best);
                perm.swap(k, best);
            }
            let lkk = pivot.sqrt();
            w[(k, k)] = lkk;
            for i in k + 1..n {
                w[(i, k)] /= lkk;
            }
            for j in k + 1..n {
                let ljk = w[(j, k)];
                if ljk == 0.0 {
                    continue;
                }
                for i in j..n {
                    let lik = w[(i, k)];
                    w[(i, j)] -= lik * ljk;
                }
            }
            // keep the trailing block symmetric for the pivot search
            for j in k + 1..n {
                for i in j + 1..n {
                    w[(j, i)] = w[(i, j)];
                }
            }
        }
        let mut l11 = DMatrix::zeros(rank, rank);
        for j in 0..rank {
            for i in j..rank {
                l11[(i, j)] = w[(i, j)];
            }
        }
        Ok(Self { n, rank, perm, l11, scale })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Original indices retained by the factorization.
    pub fn pivots(&self) -> &[usize] {
        &self.perm[..self.rank]
    }

    fn forward(&self, b: &mut DVector<f64>) {
        for i in 0..self.rank {
            let mut v = b[i];
            for k in 0..i {
                v -= self.l11[(i, k)] * b[k];
            }
            b[i] = v / self.l11[(i, i)];
        }
    }

    fn backward(&self, b: &mut DVector<f64>) {
        for i in (0..self.rank).rev() {
            let mut v = b[i];
            for k in i + 1..self.rank {
                v -= self.l11[(k, i)] * b[k];
            }
            b[i] = v / self.l11[(i, i)];
        }
    }

    /// Basic solution of `A x = b`: components outside the pivot set are 0.
    /// Exact when `b` lies in the range of `A`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::from_iterator(self.rank, self.pivots().iter().map(|&i| b[i] * self.scale[i]));
        self.forward(&mut y);
        self.backward(&mut y);
        let mut x = DVector::zeros(self.n);
        for (k, &i) in self.pivots().iter().enumerate() {
            x[i] = y[k] * self.scale[i];
        }
        x
    }

    /// `v^T A^- v` for the reflexive generalized inverse.
    pub fn inv_quad(&self, v: &DVector<f64>) -> f64 {
        let mut y = DVector::from_iterator(self.rank, self.pivots().iter().map(|&i| v[i] * self.scale[i]));
        self.forward(&mut y);
        y.norm_squared()
    }

    /// `tr(A^- H)` for symmetric `H` whose range lies in the range of `A`.
    pub fn trace_inv_times(&self, h: &DMatrix<f64>) -> f64 {
        let r = self.rank;
        let piv = self.pivots();
        let mut acc = 0.0;
        // tr(L^-T L^-1 H_BB) = sum_j || L^-1 h_j ||^2-like contractions; do it column-wise
        let d = &self.scale;
        let mut y = DMatrix::from_fn(r, r, |i, j| h[(piv[i], piv[j])] * d[piv[i]] * d[piv[j]]);
        for j in 0..r {
            let mut col = y.column(j).into_owned();
            self.forward(&mut col);
            y.set_column(j, &col);
        }
        // y = L^-1 H ; now tr(L^-T y) = sum_i (L^-1 y^T)_{ii}
        let yt = y.transpose();
        for j in 0..r {
            let mut col = yt.column(j).into_owned();
            self.forward(&mut col);
            acc += col[j];
        }
        acc
    }

    /// Explicit reflexive generalized inverse (`n x n`).
    pub fn ginv(&self) -> DMatrix<f64> {
        let r = self.rank;
        let mut out = DMatrix::zeros(self.n, self.n);
        let piv = self.pivots().to_vec();
        for j in 0..r {
            let mut e = DVector::zeros(r);
            e[j] = 1.0;
            self.forward(&mut e);
            self.backward(&mut e);
            for i in 0..r {
                out[(piv[i], piv[j])] = e[i] * self.scale[piv[i]] * self.scale[piv[j]];
            }
        }
        out
    }
}

/// Moore-Penrose inverse of a symmetric matrix through its spectral
/// decomposition. Eigenvalues below `tol * max|eigenvalue|` are treated as 0.
pub fn pseudo_inverse(c: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = c.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = tol * max;
    let mut out = DMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > cutoff && lam != 0.0 {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    out
}

/// Inverse and log-determinant of a small SPD matrix.
pub(crate) fn spd_inverse_logdet(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = a.clone().cholesky()?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Some((chol.inverse(), logdet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn penrose_residuals(c: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
        let r1 = (c * p * c - c).amax();
        let r2 = (p * c * p - p).amax();
        let cp = c * p;
        let pc = p * c;
        let r3 = (&cp - cp.transpose()).amax();
        let r4 = (&pc - pc.transpose()).amax();
        r1.max(r2).max(r3).max(r4)
    }

    #[test]
    fn pinv_simple_cases() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((pseudo_inverse(&i, 1e-12) - &i).amax() < 1e-14);
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        assert!((pseudo_inverse(&d, 1e-12) - expect).amax() < 1e-14);
    }

    #[test]
    fn pinv_rank_two_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let b = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let c = &b * b.transpose();
            let p = pseudo_inverse(&c, 1e-10);
            assert!(penrose_residuals(&c, &p) < 1e-8);
        }
    }

    #[test]
    fn pivoted_cholesky_full_rank_matches_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(6, 6) * 0.1;
        let rhs = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let f = PivotedCholesky::factor(&a, PIVOT_TOL).unwrap();
        assert_eq!(f.rank(), 6);
        let x = f.solve(&rhs);
        assert!((&a * &x - &rhs).amax() < 1e-10);
        let inv = a.clone().try_inverse().unwrap();
        assert!((f.ginv() - &inv).amax() < 1e-9);
        let h = DMatrix::from_fn(6, 6, |i, j| ((i + j) % 3) as f64);
        let h = &h + h.transpose();
        assert!((f.trace_inv_times(&h) - (&inv * &h).trace()).abs() < 1e-9);
        assert!((f.inv_quad(&rhs) - rhs.dot(&(&inv * &rhs))).abs() < 1e-9);
    }

    #[test]
    fn pivoted_cholesky_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose();
        let f = PivotedCholesky::factor(&a, PIVOT_TOL).unwrap();
        assert_eq!(f.rank(), 3);
        let rhs = &a * DVector::from_fn(5, |i, _| (i as f64).sin());
        let x = f.solve(&rhs);
        assert!((&a * &x - &rhs).amax() < 1e-9);
        // g-inverse condition A G A = A
        let g = f.ginv();
        assert!((&a * &g * &a - &a).amax() < 1e-9);
    }

    #[test]
    fn non_finite_rejected() {
        let mut a = DMatrix::<f64>::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(PivotedCholesky::factor(&a, PIVOT_TOL), Err(Error::NonFiniteInput)));
    }
}
