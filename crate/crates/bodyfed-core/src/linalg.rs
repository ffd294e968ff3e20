//! Dense symmetric matrices sized by client count, with the two
//! factorizations the scheduler needs: Cholesky-based log-determinants and a
//! Jacobi smallest-eigenvalue check.

use crate::error::{Error, Result};

/// Row-major square matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n, "row {i} has wrong length");
            m.data[i * n..(i + 1) * n].copy_from_slice(row);
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    /// Set both (i, j) and (j, i).
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Principal submatrix on the given (not necessarily sorted) index set.
    pub fn principal_submatrix(&self, idx: &[usize]) -> SquareMatrix {
        let k = idx.len();
        let mut sub = SquareMatrix::zeros(k);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                sub.data[a * k + b] = self.get(i, j);
            }
        }
        sub
    }

    /// Sum of all entries (used by the quadratic failure penalty).
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Lower-triangular Cholesky factor; None if the matrix is not positive
    /// definite.
    pub fn cholesky(&self) -> Option<Vec<f64>> {
        let n = self.n;
        let mut l = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return None;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Some(l)
    }

    /// ln det(I + self), for a symmetric matrix whose I-shift is positive
    /// definite. Errors with an invariant breach otherwise.
    pub fn log_det_identity_plus(&self) -> Result<f64> {
        if self.n == 0 {
            return Ok(0.0);
        }
        let mut shifted = self.clone();
        for i in 0..self.n {
            let v = shifted.get(i, i) + 1.0;
            shifted.set(i, i, v);
        }
        let l = shifted.cholesky().ok_or_else(|| {
            Error::InvariantBreach("I + submatrix is not positive definite".into())
        })?;
        let n = self.n;
        Ok((0..n).map(|i| 2.0 * l[i * n + i].ln()).sum())
    }

    /// Smallest eigenvalue by cyclic Jacobi rotations (symmetric input).
    pub fn smallest_eigenvalue(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 0.0;
        }
        let mut a = self.clone();
        for _sweep in 0..64 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a.get(i, j).abs();
                }
            }
            if off < 1e-13 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let app = a.get(p, p);
                    let aqq = a.get(q, q);
                    // Standard Jacobi rotation zeroing a[p][q].
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = if tau >= 0.0 {
                        1.0 / (tau + (1.0 + tau * tau).sqrt())
                    } else {
                        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                }
            }
        }
        (0..n).map(|i| a.get(i, i)).fold(f64::INFINITY, f64::min)
    }

    /// True when the smallest eigenvalue is ≥ -tol.
    pub fn is_psd_within(&self, tol: f64) -> bool {
        self.smallest_eigenvalue() >= -tol
    }
}
