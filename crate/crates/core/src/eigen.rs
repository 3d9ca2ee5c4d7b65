//! Eigenvalues of small Hermitian matrices.
//!
//! A Hermitian `H = A + iB` embeds into the real symmetric matrix
//! `[[A, -B], [B, A]]` whose spectrum is that of `H` with every eigenvalue
//! doubled, so a plain Jacobi sweep on the embedding covers the 2x2 and 4x4
//! matrices this crate deals with.

use crate::pauli::ComplexMatrix;
use crate::scalar::Real;

/// Eigenvalues of a Hermitian matrix, ascending. The input is symmetrized
/// implicitly; callers are expected to pass matrices that are Hermitian to
/// working precision.
pub fn hermitian_eigenvalues<T: Real>(m: &ComplexMatrix<T>) -> Vec<T> {
    let n = m.dim();
    let mut e = vec![T::zero(); 2 * n * 2 * n];
    for i in 0..n {
        for j in 0..n {
            let z = m[(i, j)];
            e[i * 2 * n + j] = z.re;
            e[(i + n) * 2 * n + (j + n)] = z.re;
            e[i * 2 * n + (j + n)] = -z.im;
            e[(i + n) * 2 * n + j] = z.im;
        }
    }
    let mut eig = jacobi_symmetric(&mut e, 2 * n);
    eig.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    // Every eigenvalue shows up twice in the embedding.
    eig.into_iter().step_by(2).collect()
}

pub fn min_hermitian_eigenvalue<T: Real>(m: &ComplexMatrix<T>) -> T {
    hermitian_eigenvalues(m)
        .into_iter()
        .fold(T::infinity(), T::min)
}

/// Cyclic Jacobi iteration on a dense symmetric matrix; returns the diagonal.
fn jacobi_symmetric<T: Real>(a: &mut [T], n: usize) -> Vec<T> {
    let tol = T::from_f64(1e-14)
        * a.iter().fold(T::zero(), |acc, &x| acc.max(x.abs())).max(T::one());
    for _sweep in 0..64 {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * T::from_f64(1e-2) {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (T::from_f64(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}
