//! The affine generator of the observable dynamics: for parameters
//! `(J, gamma)` build real `(A, b)` with `d<s>/dt = A <s> + b`, where `<s>`
//! is the vector of Pauli-string expectation values.
//!
//! Row `a` comes from decomposing
//! `M_a = -i [S_a, H] + sum_k gamma_k (L_k^dag S_a L_k - (1/2){S_a, L_k^dag L_k})`
//! in the Pauli basis; the identity component of `M_a` feeds `b` (the trace
//! of the state never enters `A`, which is what trace preservation looks
//! like in this picture). Both `A` and `b` are linear in the parameters, so
//! the constant per-parameter gradient matrices assembled once by
//! [`GeneratorTemplate`] rebuild the generator in O(m^2) per parameter when
//! the trainer updates its estimate.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::lindblad::{substeps, ChannelSet, ParameterSet, Trajectory};
use crate::pauli::{pauli_decompose, ComplexMatrix, ObservableBasis};
use crate::scalar::Real;

const IMAG_TOL: f64 = 1e-10;

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMat<T: Real> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> RealMat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, slot) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = T::zero();
            for (w, v) in row.iter().zip(x) {
                acc += *w * *v;
            }
            *slot = acc;
        }
    }

    /// `out = A^T x`.
    pub fn matvec_transpose(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (r, &xr) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * xr;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl<T: Real> std::ops::Index<(usize, usize)> for RealMat<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T: Real> std::ops::IndexMut<(usize, usize)> for RealMat<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// Identifies one physical parameter inside a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    /// Coupling at this Pauli-string full index (never 0).
    J(usize),
    /// Decay rate of this channel.
    Gamma(usize),
}

/// `d<s>/dt = A <s> + b` plus the constant per-parameter derivatives.
#[derive(Debug, Clone)]
pub struct AffineGenerator<T: Real> {
    pub a: RealMat<T>,
    pub b: Vec<T>,
    pub parameter_gradients: Vec<(ParamId, RealMat<T>, Vec<T>)>,
}

impl<T: Real> AffineGenerator<T> {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Debug dump: one line per row, `A` entries then the `b` column.
    pub fn to_csv(&self, basis: &ObservableBasis<T>) -> String {
        let mut out = String::from("row");
        for name in basis.column_names() {
            out.push(',');
            out.push_str(&name);
        }
        out.push_str(",b\n");
        for (r, name) in basis.column_names().iter().enumerate() {
            out.push_str(name);
            for c in 0..self.a.cols() {
                out.push_str(&format!(",{:.16e}", self.a[(r, c)].to_f64()));
            }
            out.push_str(&format!(",{:.16e}\n", self.b[r].to_f64()));
        }
        out
    }
}

/// `H = sum J_s S_s` over all Pauli strings (the identity slot is pinned to
/// zero and contributes nothing).
pub fn build_hamiltonian<T: Real>(params: &ParameterSet<T>) -> Result<ComplexMatrix<T>> {
    let basis = ObservableBasis::new(params.n_qubits());
    let mut h = ComplexMatrix::zeros(basis.dim());
    for (s, &j) in basis.matrices().iter().zip(params.j_observable()) {
        if j != T::zero() {
            h = h.add(&s.scale_re(j))?;
        }
    }
    Ok(h)
}

/// Decomposes `M_a` for every basis row into one `(A, b)` contribution.
fn rows_from_operator<T: Real>(
    basis: &ObservableBasis<T>,
    op_for_row: impl Fn(&ComplexMatrix<T>) -> Result<ComplexMatrix<T>>,
    context: &str,
) -> Result<(RealMat<T>, Vec<T>)> {
    let m = basis.len();
    let mut a = RealMat::zeros(m, m);
    let mut b = vec![T::zero(); m];
    for (row, s) in basis.matrices().iter().enumerate() {
        let m_a = op_for_row(s)?;
        let (coeffs, id) = pauli_decompose(&m_a, basis)?;
        let worst_imag = coeffs
            .iter()
            .map(|c| c.im.abs())
            .fold(id.im.abs(), T::max)
            .to_f64();
        if worst_imag > IMAG_TOL {
            return Err(Error::ResidualImaginary {
                value: worst_imag,
                limit: IMAG_TOL,
                context: format!("{context}, row {row}"),
            });
        }
        for (c, coeff) in coeffs.iter().enumerate() {
            a[(row, c)] = coeff.re;
        }
        b[row] = id.re;
    }
    Ok((a, b))
}

/// Constant building blocks of the generator: one `(dA, db)` pair per
/// coupling slot and per channel. `A(J, gamma)` and `b(J, gamma)` are exactly
/// the parameter-weighted sums of these.
#[derive(Debug, Clone)]
pub struct GeneratorTemplate<T: Real> {
    n_qubits: usize,
    dim: usize,
    /// Aligned with the observable basis (full index = slot + 1).
    j_grads: Vec<RealMat<T>>,
    gamma_grads: Vec<(RealMat<T>, Vec<T>)>,
    channel_labels: Vec<String>,
}

impl<T: Real> GeneratorTemplate<T> {
    pub fn new(basis: &ObservableBasis<T>, channels: &ChannelSet<T>) -> Result<Self> {
        if channels.dim() != basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "channel dim {} vs basis dim {}",
                channels.dim(),
                basis.dim()
            )));
        }
        let minus_i = Complex::new(T::zero(), -T::one());
        let mut j_grads = Vec::with_capacity(basis.len());
        for unit in basis.matrices() {
            let (a, b) = rows_from_operator(
                basis,
                |s| Ok(s.commutator(unit)?.scale(minus_i)),
                "commutator block",
            )?;
            debug_assert!(b.iter().all(|&x| x.abs().to_f64() < 1e-14));
            j_grads.push(a);
        }
        let half = T::from_f64(0.5);
        let mut gamma_grads = Vec::with_capacity(channels.len());
        for op in channels.operators() {
            let ldag = op.adjoint();
            let ldl = ldag.matmul(op)?;
            let pair = rows_from_operator(
                basis,
                |s| {
                    let jump = ldag.matmul(s)?.matmul(op)?;
                    jump.sub(&s.anticommutator(&ldl)?.scale_re(half))
                },
                "dissipator block",
            )?;
            gamma_grads.push(pair);
        }
        Ok(Self {
            n_qubits: basis.n_qubits(),
            dim: basis.len(),
            j_grads,
            gamma_grads,
            channel_labels: channels.labels().to_vec(),
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    /// Side length of `A` (= number of observables).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_channels(&self) -> usize {
        self.gamma_grads.len()
    }

    pub fn channel_labels(&self) -> &[String] {
        &self.channel_labels
    }

    pub fn j_grad(&self, slot: usize) -> &RealMat<T> {
        &self.j_grads[slot]
    }

    pub fn gamma_grad(&self, channel: usize) -> (&RealMat<T>, &[T]) {
        let (a, b) = &self.gamma_grads[channel];
        (a, b)
    }

    /// Writes `A(J, gamma)` and `b(J, gamma)` into flat buffers
    /// (`a_out` is row-major `dim x dim`).
    pub fn assemble_into(&self, j_obs: &[T], gamma: &[T], a_out: &mut [T], b_out: &mut [T]) {
        assert_eq!(j_obs.len(), self.dim);
        assert_eq!(gamma.len(), self.gamma_grads.len());
        a_out.iter_mut().for_each(|x| *x = T::zero());
        b_out.iter_mut().for_each(|x| *x = T::zero());
        for (grad, &j) in self.j_grads.iter().zip(j_obs) {
            if j == T::zero() {
                continue;
            }
            for (o, &g) in a_out.iter_mut().zip(grad.data()) {
                *o += j * g;
            }
        }
        for ((grad_a, grad_b), &g) in self.gamma_grads.iter().zip(gamma) {
            if g == T::zero() {
                continue;
            }
            for (o, &d) in a_out.iter_mut().zip(grad_a.data()) {
                *o += g * d;
            }
            for (o, &d) in b_out.iter_mut().zip(grad_b) {
                *o += g * d;
            }
        }
    }

    pub fn assemble(&self, params: &ParameterSet<T>) -> (RealMat<T>, Vec<T>) {
        let mut a = RealMat::zeros(self.dim, self.dim);
        let mut b = vec![T::zero(); self.dim];
        self.assemble_into(params.j_observable(), params.gamma(), &mut a.data, &mut b);
        (a, b)
    }
}

/// Builds the assembled generator together with the per-parameter constant
/// gradients.
pub fn build_generator<T: Real>(
    params: &ParameterSet<T>,
    channels: &ChannelSet<T>,
    basis: &ObservableBasis<T>,
) -> Result<AffineGenerator<T>> {
    let template = GeneratorTemplate::new(basis, channels)?;
    let (a, b) = template.assemble(params);
    let mut parameter_gradients = Vec::new();
    for slot in 0..template.dim() {
        parameter_gradients.push((
            ParamId::J(slot + 1),
            template.j_grads[slot].clone(),
            vec![T::zero(); template.dim()],
        ));
    }
    for (k, (da, db)) in template.gamma_grads.iter().enumerate() {
        parameter_gradients.push((ParamId::Gamma(k), da.clone(), db.clone()));
    }
    Ok(AffineGenerator { a, b, parameter_gradients })
}

/// `A s + b`.
pub fn rhs<T: Real>(gen: &AffineGenerator<T>, s: &[T]) -> Result<Vec<T>> {
    if s.len() != gen.dim() {
        return Err(Error::DimensionMismatch(format!(
            "rhs: state length {} vs generator dim {}",
            s.len(),
            gen.dim()
        )));
    }
    let mut out = vec![T::zero(); gen.dim()];
    gen.a.matvec(s, &mut out);
    for (o, &bv) in out.iter_mut().zip(&gen.b) {
        *o += bv;
    }
    Ok(out)
}

/// RK4 on `ds/dt = A s + b`, same stepping contract as the density-matrix
/// integrator so the two paths stay comparable sample by sample.
pub fn evolve_pauli<T: Real>(
    gen: &AffineGenerator<T>,
    s0: &[T],
    times: &[T],
) -> Result<Trajectory<T>> {
    evolve_affine(&gen.a, &gen.b, s0, times)
}

pub fn evolve_affine<T: Real>(
    a: &RealMat<T>,
    b: &[T],
    s0: &[T],
    times: &[T],
) -> Result<Trajectory<T>> {
    let m = b.len();
    if s0.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "evolve_pauli: state length {} vs generator dim {m}",
            s0.len()
        )));
    }
    if times.len() < 2 || times[0] != T::zero() {
        return Err(Error::InvalidConfig(
            "sample times must start at 0 and contain at least two points".to_string(),
        ));
    }
    for w in times.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidConfig(
                "sample times must be strictly increasing".to_string(),
            ));
        }
    }
    let t_final = *times.last().expect("nonempty");
    let mut s = s0.to_vec();
    let mut columns: Vec<Vec<T>> = Vec::with_capacity(times.len());
    columns.push(s.clone());

    let mut k1 = vec![T::zero(); m];
    let mut k2 = vec![T::zero(); m];
    let mut k3 = vec![T::zero(); m];
    let mut k4 = vec![T::zero(); m];
    let mut stage = vec![T::zero(); m];
    let half = T::from_f64(0.5);
    let sixth = T::from_f64(1.0 / 6.0);
    let two = T::from_f64(2.0);

    let eval = |s_in: &[T], out: &mut Vec<T>| {
        a.matvec(s_in, out);
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
    };

    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let n_sub = substeps(t1 - t0, t_final);
        let h = (t1 - t0) / T::from_f64(n_sub as f64);
        for _ in 0..n_sub {
            eval(&s, &mut k1);
            for i in 0..m {
                stage[i] = s[i] + half * h * k1[i];
            }
            eval(&stage, &mut k2);
            for i in 0..m {
                stage[i] = s[i] + half * h * k2[i];
            }
            eval(&stage, &mut k3);
            for i in 0..m {
                stage[i] = s[i] + h * k3[i];
            }
            eval(&stage, &mut k4);
            for i in 0..m {
                s[i] = s[i] + h * sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
            }
        }
        for &v in &s {
            if v.to_f64().abs() > 1.0 + 1e-9 {
                return Err(Error::IntegrationFailure {
                    t: t1.to_f64(),
                    reason: format!("observable out of range: {}", v.to_f64()),
                });
            }
        }
        columns.push(s.clone());
    }

    let mut values = Vec::with_capacity(m * times.len());
    for a_idx in 0..m {
        for col in &columns {
            values.push(col[a_idx]);
        }
    }
    Trajectory::new(times.to_vec(), values, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::{
        equally_spaced_times, evolve, observable_vector, plus_plus_state,
        sample_random_parameters, TrainableMask,
    };

    const TAU: f64 = std::f64::consts::TAU;

    fn basis2() -> ObservableBasis<f64> {
        ObservableBasis::new(2)
    }

    #[test]
    fn hamiltonian_zero_and_single_term() {
        let params = ParameterSet::<f64>::zeros(2, 4);
        let h = build_hamiltonian(&params).unwrap();
        assert_eq!(h.max_abs(), 0.0);

        // only J_{3,0} = omega
        let mut j = vec![0.0; 16];
        let omega = 1.9;
        j[12] = omega; // full index of (3,0)
        let params = ParameterSet::new(2, j, vec![0.0; 4]).unwrap();
        let h = build_hamiltonian(&params).unwrap();
        let expected = crate::pauli::PauliString::new(&[3, 0])
            .unwrap()
            .matrix::<f64>()
            .scale_re(omega);
        assert_eq!(h.max_abs_diff(&expected), 0.0);
    }

    #[test]
    fn hamiltonian_decompose_round_trip() {
        let mask = TrainableMask::all_trainable(2, 4);
        let params = sample_random_parameters::<f64>(2, 21, &mask, TAU);
        let h = build_hamiltonian(&params).unwrap();
        assert!(h.hermiticity_error() < 1e-12);
        let (coeffs, id) = pauli_decompose(&h, &basis2()).unwrap();
        assert!(id.norm() < 1e-12);
        for (c, &j) in coeffs.iter().zip(params.j_observable()) {
            assert!((c.re - j).abs() < 1e-12 && c.im.abs() < 1e-15);
        }
    }

    #[test]
    fn unitary_generator_antisymmetric() {
        let mask = TrainableMask::all_trainable(2, 4).with_gamma_disabled();
        let params = sample_random_parameters::<f64>(2, 3, &mask, TAU);
        let channels = ChannelSet::two_qubit_standard();
        let gen = build_generator(&params, &channels, &basis2()).unwrap();
        assert!(gen.b.iter().all(|&b| b.abs() < 1e-12), "b must vanish at gamma = 0");
        for r in 0..gen.dim() {
            for c in 0..gen.dim() {
                assert!(
                    (gen.a[(r, c)] + gen.a[(c, r)]).abs() < 1e-12,
                    "A not antisymmetric at ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn pure_dephasing_generator_single_qubit() {
        // H = 0, L = sigma_3 (unnormalized): A = diag(-2g, -2g, 0), b = 0.
        let basis = ObservableBasis::<f64>::new(1);
        let channels = ChannelSet::<f64>::new(
            vec![crate::pauli::pauli_matrix(3).unwrap()],
            vec!["dephase".to_string()],
        );
        let g = 0.73;
        let params = ParameterSet::new(1, vec![0.0; 4], vec![g]).unwrap();
        let gen = build_generator(&params, &channels, &basis).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want = match (r, c) {
                    (0, 0) | (1, 1) => -2.0 * g,
                    _ => 0.0,
                };
                assert!((gen.a[(r, c)] - want).abs() < 1e-14, "entry ({r},{c})");
            }
        }
        assert!(gen.b.iter().all(|&b| b.abs() < 1e-14));
    }

    #[test]
    fn contraction_two_qubit_dephasing_only() {
        // Dephasing-only presets with H = 0 give a diagonal, nonpositive A.
        let channels = ChannelSet::<f64>::two_qubit_standard();
        let params =
            ParameterSet::new(2, vec![0.0; 16], vec![0.0, 0.8, 0.0, 0.3]).unwrap();
        let gen = build_generator(&params, &channels, &basis2()).unwrap();
        for r in 0..15 {
            for c in 0..15 {
                if r == c {
                    assert!(gen.a[(r, c)] <= 1e-14, "diagonal entry positive at {r}");
                } else {
                    assert!(gen.a[(r, c)].abs() < 1e-14, "off-diagonal at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn generator_linear_in_parameters() {
        let mask = TrainableMask::all_trainable(2, 4);
        let params = sample_random_parameters::<f64>(2, 8, &mask, TAU);
        let channels = ChannelSet::two_qubit_standard();
        let basis = basis2();
        let gen = build_generator(&params, &channels, &basis).unwrap();

        // Rebuild A and b from the constant gradients alone.
        let mut a_sum = RealMat::<f64>::zeros(15, 15);
        let mut b_sum = vec![0.0; 15];
        for (id, da, db) in &gen.parameter_gradients {
            let theta = match id {
                ParamId::J(full) => params.j()[*full],
                ParamId::Gamma(k) => params.gamma()[*k],
            };
            for (o, &d) in a_sum.data.iter_mut().zip(da.data()) {
                *o += theta * d;
            }
            for (o, &d) in b_sum.iter_mut().zip(db) {
                *o += theta * d;
            }
        }
        for r in 0..15 {
            assert!((gen.b[r] - b_sum[r]).abs() < 1e-12);
            for c in 0..15 {
                assert!((gen.a[(r, c)] - a_sum[(r, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rhs_cases() {
        let mask = TrainableMask::all_trainable(2, 4).with_gamma_disabled();
        let params = sample_random_parameters::<f64>(2, 2, &mask, TAU);
        let channels = ChannelSet::two_qubit_standard();
        let gen = build_generator(&params, &channels, &basis2()).unwrap();
        let out = rhs(&gen, &vec![0.0; 15]).unwrap();
        assert!(out.iter().all(|&v| v.abs() < 1e-15), "rhs(0) = 0 when gamma = 0");
        assert!(rhs(&gen, &vec![0.0; 3]).is_err());
    }

    #[test]
    fn rhs_fixed_point() {
        // Solve A s* = -b by Gaussian elimination, then rhs(s*) ~ 0.
        let channels = ChannelSet::<f64>::one_qubit_finite_t();
        let basis = ObservableBasis::<f64>::new(1);
        let params =
            ParameterSet::new(1, vec![0.0, 0.3, 0.0, 0.9], vec![0.2, 0.8, 0.1]).unwrap();
        let gen = build_generator(&params, &channels, &basis).unwrap();

        let n = 3;
        let mut aug = vec![[0.0f64; 4]; 3];
        for r in 0..n {
            for c in 0..n {
                aug[r][c] = gen.a[(r, c)];
            }
            aug[r][n] = -gen.b[r];
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            assert!(aug[col][col].abs() > 1e-12, "generator unexpectedly singular");
            for r in 0..n {
                if r != col {
                    let f = aug[r][col] / aug[col][col];
                    for c in col..=n {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        let fixed: Vec<f64> = (0..n).map(|r| aug[r][n] / aug[r][r]).collect();
        let out = rhs(&gen, &fixed).unwrap();
        assert!(out.iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn rhs_matches_density_finite_differences() {
        let mask = TrainableMask::all_trainable(2, 4);
        let params = sample_random_parameters::<f64>(2, 17, &mask, TAU);
        let channels = ChannelSet::two_qubit_standard();
        let basis = basis2();
        let gen = build_generator(&params, &channels, &basis).unwrap();

        let h = 1e-4;
        let times = vec![0.0, 0.3 - h, 0.3, 0.3 + h];
        let traj = evolve(&plus_plus_state(2), &params, &channels, &times).unwrap();
        let s_mid = traj.column(2);
        let out = rhs(&gen, &s_mid).unwrap();
        for a in 0..15 {
            let fd = (traj.value(a, 3) - traj.value(a, 1)) / (2.0 * h);
            assert!(
                (out[a] - fd).abs() < 1e-5,
                "row {a}: rhs {} vs fd {fd}",
                out[a]
            );
        }
    }

    #[test]
    fn evolve_pauli_zero_generator() {
        let channels = ChannelSet::<f64>::two_qubit_standard();
        let params = ParameterSet::zeros(2, 4);
        let gen = build_generator(&params, &channels, &basis2()).unwrap();
        let s0 = vec![0.2; 15];
        let times = equally_spaced_times(5, 1.0);
        let traj = evolve_pauli(&gen, &s0, &times).unwrap();
        for k in 0..traj.n_times() {
            assert_eq!(traj.column(k), s0);
        }
    }

    #[test]
    fn oracle_equivalence_sampled() {
        // The central cross-check: Pauli-basis evolution against the
        // density-matrix integrator on random parameter sets.
        let mask = TrainableMask::all_trainable(2, 4);
        let channels = ChannelSet::two_qubit_standard();
        let basis = basis2();
        let times = equally_spaced_times(60, 1.0);
        let rho0 = plus_plus_state::<f64>(2);
        let s0 = observable_vector(rho0.matrix(), &basis, 0.0).unwrap();
        for seed in 40..44u64 {
            let params = sample_random_parameters(2, seed, &mask, TAU);
            let dense = evolve(&rho0, &params, &channels, &times).unwrap();
            let gen = build_generator(&params, &channels, &basis).unwrap();
            let fast = evolve_pauli(&gen, &s0, &times).unwrap();
            let diff = dense.max_abs_diff(&fast);
            assert!(diff < 1e-8, "seed {seed}: max deviation {diff:.3e}");
        }
    }

    #[test]
    fn unitary_flow_preserves_norm() {
        let mask = TrainableMask::all_trainable(2, 4).with_gamma_disabled();
        let params = sample_random_parameters::<f64>(2, 31, &mask, TAU);
        let channels = ChannelSet::two_qubit_standard();
        let basis = basis2();
        let gen = build_generator(&params, &channels, &basis).unwrap();
        let rho0 = plus_plus_state::<f64>(2);
        let s0 = observable_vector(rho0.matrix(), &basis, 0.0).unwrap();
        let times = equally_spaced_times(40, 1.0);
        let traj = evolve_pauli(&gen, &s0, &times).unwrap();
        let norm0: f64 = s0.iter().map(|v| v * v).sum();
        for k in 0..traj.n_times() {
            let n: f64 = traj.column(k).iter().map(|v| v * v).sum();
            assert!((n - norm0).abs() < 1e-9, "norm drift at sample {k}");
        }
    }

    #[test]
    fn single_qubit_damped_oscillation() {
        // Recovered-scale single-qubit parameters: <sx> is a damped cosine
        // whose zero crossings sit near multiples of pi / (2 |J2|).
        let params = ParameterSet::new(
            1,
            vec![0.0, 0.024, -1.52, -0.0108],
            vec![0.126, 0.0789, 4.39e-5],
        )
        .unwrap();
        let channels = ChannelSet::one_qubit_finite_t();
        let basis = ObservableBasis::<f64>::new(1);
        let gen = build_generator(&params, &channels, &basis).unwrap();
        let times = equally_spaced_times(2001, 10.0);
        let traj = evolve_pauli(&gen, &[1.0, 0.0, 0.0], &times).unwrap();

        let mut crossings = Vec::new();
        for k in 1..traj.n_times() {
            let (a, b) = (traj.value(0, k - 1), traj.value(0, k));
            if a.signum() != b.signum() {
                let t = times[k - 1] + (times[k] - times[k - 1]) * a / (a - b);
                crossings.push(t);
            }
        }
        assert!(crossings.len() >= 4, "expected several oscillations in 10 us");
        let half_period = std::f64::consts::PI / (2.0 * 1.52);
        for w in crossings.windows(2) {
            let spacing = w[1] - w[0];
            assert!(
                (spacing - half_period).abs() / half_period < 0.05,
                "crossing spacing {spacing} vs half period {half_period}"
            );
        }
        // Damped: later extrema are smaller than the start.
        let early: f64 = traj.row(0)[..200].iter().fold(0.0, |m, v| m.max(v.abs()));
        let late: f64 = traj.row(0)[1800..].iter().fold(0.0, |m, v| m.max(v.abs()));
        assert!(late < 0.5 * early, "oscillation failed to decay ({early} -> {late})");
    }

    #[test]
    fn generator_csv_dump() {
        let basis = ObservableBasis::<f64>::new(1);
        let channels = ChannelSet::one_qubit_finite_t();
        let params = ParameterSet::new(1, vec![0.0, 0.0, 0.0, 1.0], vec![0.1, 0.0, 0.0]).unwrap();
        let gen = build_generator(&params, &channels, &basis).unwrap();
        let csv = gen.to_csv(&basis);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "row,sx,sy,sz,b");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn template_assembly_matches_build_generator() {
        let mask = TrainableMask::all_trainable(2, 4);
        let params = sample_random_parameters::<f64>(2, 77, &mask, TAU);
        let channels = ChannelSet::two_qubit_standard();
        let basis = basis2();
        let template = GeneratorTemplate::new(&basis, &channels).unwrap();
        let (a, b) = template.assemble(&params);
        let gen = build_generator(&params, &channels, &basis).unwrap();
        assert_eq!(a, gen.a);
        assert_eq!(b, gen.b);
    }
}
