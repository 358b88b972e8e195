//! Small dense matrix helpers for the invertible 1x1 convolutions:
//! LU factorization with partial pivoting (determinant, solves, inverse)
//! and random-rotation initialization.

use crate::rng::SplitRng;
use crate::scalar::Scalar;

/// LU factorization of a square matrix, PA = LU.
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    piv: Vec<usize>,
    sign: T,
}

impl<T: Scalar> Lu<T> {
    /// Factor a row-major n x n matrix. Always succeeds structurally; a
    /// (near-)singular input shows up as a ~zero determinant.
    pub fn factor(a: &[T], n: usize) -> Lu<T> {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in k + 1..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                piv.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            if pivot == T::zero() {
                continue;
            }
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                for c in k + 1..n {
                    let sub = f * lu[k * n + c];
                    lu[r * n + c] = lu[r * n + c] - sub;
                }
            }
        }
        Lu { n, lu, piv, sign }
    }

    pub fn det(&self) -> T {
        let mut d = self.sign;
        for k in 0..self.n {
            d = d * self.lu[k * self.n + k];
        }
        d
    }

    /// Solve A x = b for a single right-hand side, in place.
    pub fn solve_vec(&self, b: &[T], out: &mut [T]) {
        let n = self.n;
        for i in 0..n {
            out[i] = b[self.piv[i]];
        }
        for i in 0..n {
            for j in 0..i {
                let sub = self.lu[i * n + j] * out[j];
                out[i] = out[i] - sub;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let sub = self.lu[i * n + j] * out[j];
                out[i] = out[i] - sub;
            }
            out[i] = out[i] / self.lu[i * n + i];
        }
    }

    /// Dense inverse (column-by-column solves).
    pub fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut e = vec![T::zero(); n];
        let mut col = vec![T::zero(); n];
        for c in 0..n {
            for v in e.iter_mut() {
                *v = T::zero();
            }
            e[c] = T::one();
            self.solve_vec(&e, &mut col);
            for r in 0..n {
                inv[r * n + c] = col[r];
            }
        }
        inv
    }
}

/// Determinant of a row-major n x n matrix.
pub fn det<T: Scalar>(a: &[T], n: usize) -> T {
    Lu::factor(a, n).det()
}

/// Row-major matrix product (m x k) * (k x n).
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for l in 0..k {
            let aij = a[i * k + l];
            if aij == T::zero() {
                continue;
            }
            for j in 0..n {
                let add = aij * b[l * n + j];
                out[i * n + j] = out[i * n + j] + add;
            }
        }
    }
    out
}

/// Random rotation (orthogonal with det +1) via modified Gram-Schmidt on a
/// Gaussian matrix, computed in f64 then cast.
pub fn random_rotation<T: Scalar>(n: usize, rng: &mut SplitRng) -> Vec<T> {
    let mut m = vec![0.0f64; n * n];
    for v in m.iter_mut() {
        *v = rng.normal();
    }
    // Orthonormalize columns, two passes for stability.
    for _pass in 0..2 {
        for c in 0..n {
            for prev in 0..c {
                let mut dot = 0.0;
                for r in 0..n {
                    dot += m[r * n + c] * m[r * n + prev];
                }
                for r in 0..n {
                    m[r * n + c] -= dot * m[r * n + prev];
                }
            }
            let mut norm = 0.0;
            for r in 0..n {
                norm += m[r * n + c] * m[r * n + c];
            }
            let norm = libm::sqrt(norm).max(1e-12);
            for r in 0..n {
                m[r * n + c] /= norm;
            }
        }
    }
    if det(&m, n) < 0.0 {
        // Flip one column to land in SO(n).
        for r in 0..n {
            m[r * n] = -m[r * n];
        }
    }
    m.into_iter().map(T::of_f64).collect()
}
