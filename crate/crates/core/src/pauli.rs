//! Exact complex linear algebra for tensor products of Pauli matrices:
//! operator construction, products, commutators, and trace inner products.
//!
//! Largest operator here is 4x4, so everything is dense and eagerly
//! evaluated. All operations are pure functions on immutable inputs.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense complex matrix in row-major order. `dim` is 2 for one qubit and 4
/// for two qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix<T: Real> {
    dim: usize,
    entries: Vec<Complex<T>>,
}

impl<T: Real> ComplexMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: vec![Complex::new(T::zero(), T::zero()); dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = Complex::new(T::one(), T::zero());
        }
        m
    }

    /// Builds from row-major `(re, im)` pairs; length must be `dim * dim`.
    pub fn from_row_major(dim: usize, entries: &[(f64, f64)]) -> Self {
        assert_eq!(entries.len(), dim * dim, "entry count must be dim^2");
        Self {
            dim,
            entries: entries
                .iter()
                .map(|&(re, im)| Complex::new(T::from_f64(re), T::from_f64(im)))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Complex<T>] {
        &self.entries
    }

    fn check_same_dim(&self, other: &Self, op: &str) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch(format!(
                "{op}: {} vs {}",
                self.dim, other.dim
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.check_same_dim(other, "matmul")?;
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.entries[i * n + k];
                if aik.re == T::zero() && aik.im == T::zero() {
                    continue;
                }
                for j in 0..n {
                    out.entries[i * n + j] = out.entries[i * n + j] + aik * other.entries[k * n + j];
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_dim(other, "add")?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self { dim: self.dim, entries })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_dim(other, "sub")?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self { dim: self.dim, entries })
    }

    pub fn scale(&self, factor: Complex<T>) -> Self {
        Self { dim: self.dim, entries: self.entries.iter().map(|e| e * factor).collect() }
    }

    pub fn scale_re(&self, factor: T) -> Self {
        self.scale(Complex::new(factor, T::zero()))
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.entries[j * n + i] = self.entries[i * n + j].conj();
            }
        }
        out
    }

    pub fn trace(&self) -> Complex<T> {
        let mut t = Complex::new(T::zero(), T::zero());
        for i in 0..self.dim {
            t = t + self.entries[i * self.dim + i];
        }
        t
    }

    /// Kronecker product; result dimension is the product of the inputs'.
    pub fn kron(&self, other: &Self) -> Self {
        let (n, m) = (self.dim, other.dim);
        let mut out = Self::zeros(n * m);
        for i in 0..n {
            for j in 0..n {
                let a = self.entries[i * n + j];
                for k in 0..m {
                    for l in 0..m {
                        out.entries[(i * m + k) * (n * m) + (j * m + l)] =
                            a * other.entries[k * m + l];
                    }
                }
            }
        }
        out
    }

    /// `AB - BA`.
    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.matmul(other)?.sub(&other.matmul(self)?)
    }

    /// `AB + BA`.
    pub fn anticommutator(&self, other: &Self) -> Result<Self> {
        self.matmul(other)?.add(&other.matmul(self)?)
    }

    /// Largest entry magnitude of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).norm())
            .fold(T::zero(), T::max)
    }

    /// Largest entry magnitude of `M - M^dagger`.
    pub fn hermiticity_error(&self) -> T {
        self.max_abs_diff(&self.adjoint())
    }

    pub fn max_abs(&self) -> T {
        self.entries.iter().map(|e| e.norm()).fold(T::zero(), T::max)
    }
}

impl<T: Real> std::ops::Index<(usize, usize)> for ComplexMatrix<T> {
    type Output = Complex<T>;
    fn index(&self, (i, j): (usize, usize)) -> &Complex<T> {
        &self.entries[i * self.dim + j]
    }
}

impl<T: Real> std::ops::IndexMut<(usize, usize)> for ComplexMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<T> {
        &mut self.entries[i * self.dim + j]
    }
}

/// The single-qubit Pauli matrix for `label` 0..=3 (0 is the identity).
pub fn pauli_matrix<T: Real>(label: u8) -> Result<ComplexMatrix<T>> {
    let entries: [(f64, f64); 4] = match label {
        0 => [(1.0, 0.0), (0.0, 0.0), (0.0, 0.0), (1.0, 0.0)],
        1 => [(0.0, 0.0), (1.0, 0.0), (1.0, 0.0), (0.0, 0.0)],
        2 => [(0.0, 0.0), (0.0, -1.0), (0.0, 1.0), (0.0, 0.0)],
        3 => [(1.0, 0.0), (0.0, 0.0), (0.0, 0.0), (-1.0, 0.0)],
        _ => return Err(Error::PauliLabelOutOfRange(label)),
    };
    Ok(ComplexMatrix::from_row_major(2, &entries))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ladder {
    Minus,
    Plus,
}

/// The lowering operator `(sigma_1 - i sigma_2)/2` or its adjoint, derived
/// from the `pauli_matrix` definitions so no extra sign convention enters.
pub fn lowering_raising<T: Real>(which: Ladder) -> ComplexMatrix<T> {
    let s1 = pauli_matrix::<T>(1).expect("label 1 valid");
    let s2 = pauli_matrix::<T>(2).expect("label 2 valid");
    let minus = s1
        .sub(&s2.scale(Complex::new(T::zero(), T::one())))
        .expect("same dim")
        .scale_re(T::from_f64(0.5));
    match which {
        Ladder::Minus => minus,
        Ladder::Plus => minus.adjoint(),
    }
}

/// One Pauli label per qubit; index 0 is the identity on that qubit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PauliString(Vec<u8>);

impl PauliString {
    pub fn new(labels: &[u8]) -> Result<Self> {
        if labels.is_empty() || labels.len() > 2 {
            return Err(Error::DimensionMismatch(format!(
                "pauli string must cover 1 or 2 qubits, got {}",
                labels.len()
            )));
        }
        for &l in labels {
            if l > 3 {
                return Err(Error::PauliLabelOutOfRange(l));
            }
        }
        Ok(Self(labels.to_vec()))
    }

    pub fn labels(&self) -> &[u8] {
        &self.0
    }

    pub fn n_qubits(&self) -> usize {
        self.0.len()
    }

    /// Lexicographic index over all 4^n strings; the all-identity string is 0.
    pub fn full_index(&self) -> usize {
        self.0.iter().fold(0usize, |acc, &l| acc * 4 + l as usize)
    }

    pub fn from_full_index(n_qubits: usize, mut index: usize) -> Self {
        let mut labels = vec![0u8; n_qubits];
        for q in (0..n_qubits).rev() {
            labels[q] = (index % 4) as u8;
            index /= 4;
        }
        Self(labels)
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|&l| l == 0)
    }

    /// Kronecker product of the per-qubit Pauli matrices.
    pub fn matrix<T: Real>(&self) -> ComplexMatrix<T> {
        let mut m = pauli_matrix::<T>(self.0[0]).expect("validated label");
        for &l in &self.0[1..] {
            m = m.kron(&pauli_matrix::<T>(l).expect("validated label"));
        }
        m
    }

    /// Column name used in trajectory CSV files: `S_mu_nu` for two qubits,
    /// `sx`/`sy`/`sz` for one.
    pub fn column_name(&self) -> String {
        match self.0.as_slice() {
            [1] => "sx".to_string(),
            [2] => "sy".to_string(),
            [3] => "sz".to_string(),
            labels => {
                let parts: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
                format!("S_{}", parts.join("_"))
            }
        }
    }
}

/// The ordered set of all 4^n - 1 non-identity Pauli strings, lexicographic
/// in the per-qubit labels, with the operator matrices cached.
#[derive(Debug, Clone)]
pub struct ObservableBasis<T: Real> {
    n_qubits: usize,
    strings: Vec<PauliString>,
    matrices: Vec<ComplexMatrix<T>>,
}

impl<T: Real> ObservableBasis<T> {
    pub fn new(n_qubits: usize) -> Self {
        assert!(n_qubits == 1 || n_qubits == 2, "only 1 or 2 qubits supported");
        let strings: Vec<PauliString> = (1..4usize.pow(n_qubits as u32))
            .map(|i| PauliString::from_full_index(n_qubits, i))
            .collect();
        let matrices = strings.iter().map(|s| s.matrix()).collect();
        Self { n_qubits, strings, matrices }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    /// Number of observables, `4^n - 1`.
    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn strings(&self) -> &[PauliString] {
        &self.strings
    }

    pub fn matrix(&self, index: usize) -> &ComplexMatrix<T> {
        &self.matrices[index]
    }

    pub fn matrices(&self) -> &[ComplexMatrix<T>] {
        &self.matrices
    }

    pub fn column_names(&self) -> Vec<String> {
        self.strings.iter().map(|s| s.column_name()).collect()
    }
}

/// Expands `M` in the Pauli-string basis: returns the coefficients of the
/// non-identity strings and the identity coefficient, so that
/// `M = identity_coeff * I + sum_a coeffs[a] * S_a`.
pub fn pauli_decompose<T: Real>(
    m: &ComplexMatrix<T>,
    basis: &ObservableBasis<T>,
) -> Result<(Vec<Complex<T>>, Complex<T>)> {
    if m.dim() != basis.dim() {
        return Err(Error::DimensionMismatch(format!(
            "pauli_decompose: matrix dim {} vs basis dim {}",
            m.dim(),
            basis.dim()
        )));
    }
    let norm = T::from_f64(1.0 / basis.dim() as f64);
    let coeffs = basis
        .matrices()
        .iter()
        .map(|s| {
            s.matmul(m).expect("dims checked").trace() * Complex::new(norm, T::zero())
        })
        .collect();
    let identity_coeff = m.trace() * Complex::new(norm, T::zero());
    Ok((coeffs, identity_coeff))
}
