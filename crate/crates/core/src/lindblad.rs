//! Ground-truth oracle: integrates the density-matrix master equation,
//! extracts observable trajectories, and injects Gaussian measurement noise
//! to produce synthetic experimental data.
//!
//! The integrator is a fixed-step RK4 on an internal grid at least as fine
//! as `t_final / 4096`, refined per output interval so that every requested
//! sample time is hit exactly. No adaptive stepping, so runs are
//! bit-reproducible across platforms.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::eigen::min_hermitian_eigenvalue;
use crate::error::{Error, Result};
use crate::liouvillian::build_hamiltonian;
use crate::pauli::{lowering_raising, ComplexMatrix, Ladder, ObservableBasis, PauliString};
use crate::scalar::Real;

/// Internal RK4 resolution: steps never exceed `t_final / RK4_DIVISIONS`.
pub const RK4_DIVISIONS: usize = 4096;

const TRACE_TOL: f64 = 1e-9;
const HERMITICITY_TOL: f64 = 1e-10;
const POSITIVITY_TOL: f64 = -1e-8;
const IMAG_RESIDUE_TOL: f64 = 1e-10;

/// The physical unknowns: real couplings `J` indexed by Pauli string
/// (full-index order, the all-identity entry pinned to zero) and one
/// nonnegative decay rate per Lindblad channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T: Real> {
    n_qubits: usize,
    j: Vec<T>,
    gamma: Vec<T>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new(n_qubits: usize, j: Vec<T>, gamma: Vec<T>) -> Result<Self> {
        let slots = 4usize.pow(n_qubits as u32);
        if j.len() != slots {
            return Err(Error::DimensionMismatch(format!(
                "expected {} J entries for {} qubit(s), got {}",
                slots,
                n_qubits,
                j.len()
            )));
        }
        if j[0] != T::zero() {
            return Err(Error::InvalidConfig(
                "the all-identity J entry must be zero".to_string(),
            ));
        }
        for (index, &g) in gamma.iter().enumerate() {
            if g < T::zero() {
                return Err(Error::NegativeGamma { index, value: g.to_f64() });
            }
        }
        Ok(Self { n_qubits, j, gamma })
    }

    pub fn zeros(n_qubits: usize, n_channels: usize) -> Self {
        let slots = 4usize.pow(n_qubits as u32);
        Self { n_qubits, j: vec![T::zero(); slots], gamma: vec![T::zero(); n_channels] }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    /// Couplings in full-index order (`j[0]` is the pinned identity slot).
    pub fn j(&self) -> &[T] {
        &self.j
    }

    pub fn gamma(&self) -> &[T] {
        &self.gamma
    }

    pub fn j_for(&self, s: &PauliString) -> T {
        self.j[s.full_index()]
    }

    /// Couplings of the non-identity strings, aligned with
    /// [`ObservableBasis`] ordering.
    pub fn j_observable(&self) -> &[T] {
        &self.j[1..]
    }
}

/// Ordered Lindblad channels, each an operator with a human-readable label.
#[derive(Debug, Clone)]
pub struct ChannelSet<T: Real> {
    operators: Vec<ComplexMatrix<T>>,
    labels: Vec<String>,
}

impl<T: Real> ChannelSet<T> {
    pub fn new(operators: Vec<ComplexMatrix<T>>, labels: Vec<String>) -> Self {
        assert_eq!(operators.len(), labels.len());
        Self { operators, labels }
    }

    /// Amplitude damping plus dephasing on each of two qubits:
    /// `[sigma_- x I, sigma_3 x I, I x sigma_-, I x sigma_3]`.
    pub fn two_qubit_standard() -> Self {
        let id = ComplexMatrix::identity(2);
        let minus = lowering_raising::<T>(Ladder::Minus);
        let s3 = crate::pauli::pauli_matrix::<T>(3).expect("label 3 valid");
        Self::new(
            vec![minus.kron(&id), s3.kron(&id), id.kron(&minus), id.kron(&s3)],
            vec![
                "minus_1".to_string(),
                "dephase_1".to_string(),
                "minus_2".to_string(),
                "dephase_2".to_string(),
            ],
        )
    }

    /// Finite-temperature amplitude damping on one qubit:
    /// `[sigma_3, sigma_-, sigma_+]`.
    pub fn one_qubit_finite_t() -> Self {
        Self::new(
            vec![
                crate::pauli::pauli_matrix::<T>(3).expect("label 3 valid"),
                lowering_raising::<T>(Ladder::Minus),
                lowering_raising::<T>(Ladder::Plus),
            ],
            vec!["dephase".to_string(), "minus".to_string(), "plus".to_string()],
        )
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn operators(&self) -> &[ComplexMatrix<T>] {
        &self.operators
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.operators.first().map_or(0, |op| op.dim())
    }
}

/// Hermitian, unit-trace, positive-semidefinite state.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T: Real> {
    matrix: ComplexMatrix<T>,
}

impl<T: Real> DensityMatrix<T> {
    pub fn new(matrix: ComplexMatrix<T>) -> Result<Self> {
        validate_state(&matrix, 0.0)?;
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &ComplexMatrix<T> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn purity(&self) -> T {
        self.matrix.matmul(&self.matrix).expect("square").trace().re
    }
}

fn validate_state<T: Real>(m: &ComplexMatrix<T>, t: f64) -> Result<()> {
    if m.hermiticity_error().to_f64() > HERMITICITY_TOL {
        return Err(Error::IntegrationFailure {
            t,
            reason: format!("hermiticity error {:.3e}", m.hermiticity_error().to_f64()),
        });
    }
    let trace_err = (m.trace().re.to_f64() - 1.0).abs().max(m.trace().im.to_f64().abs());
    if trace_err > TRACE_TOL {
        return Err(Error::IntegrationFailure {
            t,
            reason: format!("trace drift {trace_err:.3e}"),
        });
    }
    let min_eig = min_hermitian_eigenvalue(m).to_f64();
    if min_eig < POSITIVITY_TOL {
        return Err(Error::IntegrationFailure {
            t,
            reason: format!("positivity violation, min eigenvalue {min_eig:.3e}"),
        });
    }
    Ok(())
}

/// The product state `|+>^n` as a density matrix: every entry is `1 / 2^n`.
pub fn plus_plus_state<T: Real>(n_qubits: usize) -> DensityMatrix<T> {
    assert!(n_qubits == 1 || n_qubits == 2);
    let dim = 1 << n_qubits;
    let value = T::from_f64(1.0 / dim as f64);
    let mut m = ComplexMatrix::zeros(dim);
    for i in 0..dim {
        for j in 0..dim {
            m[(i, j)] = Complex::new(value, T::zero());
        }
    }
    DensityMatrix { matrix: m }
}

/// The observable vector of a state: `<S_a> = Tr(rho S_a)` for every basis
/// element, imaginary residue asserted away.
pub fn observable_vector<T: Real>(
    rho: &ComplexMatrix<T>,
    basis: &ObservableBasis<T>,
    t: f64,
) -> Result<Vec<T>> {
    basis
        .matrices()
        .iter()
        .map(|s| {
            let tr = rho.matmul(s).expect("dims agree").trace();
            if tr.im.to_f64().abs() > IMAG_RESIDUE_TOL {
                return Err(Error::ResidualImaginary {
                    value: tr.im.to_f64().abs(),
                    limit: IMAG_RESIDUE_TOL,
                    context: format!("observable expectation at t = {t}"),
                });
            }
            Ok(tr.re)
        })
        .collect()
}

/// Right-hand side of the master equation with `hbar = 1`:
/// `i[rho, H] + sum_k gamma_k (L rho L^dag - (1/2){L^dag L, rho})`.
pub fn lindblad_rhs<T: Real>(
    rho: &ComplexMatrix<T>,
    hamiltonian: &ComplexMatrix<T>,
    channels: &ChannelSet<T>,
    gamma: &[T],
) -> Result<ComplexMatrix<T>> {
    if rho.dim() != hamiltonian.dim() {
        return Err(Error::DimensionMismatch(format!(
            "lindblad_rhs: rho dim {} vs H dim {}",
            rho.dim(),
            hamiltonian.dim()
        )));
    }
    if gamma.len() != channels.len() {
        return Err(Error::DimensionMismatch(format!(
            "lindblad_rhs: {} gamma values vs {} channels",
            gamma.len(),
            channels.len()
        )));
    }
    for (index, &g) in gamma.iter().enumerate() {
        if g < T::zero() {
            return Err(Error::NegativeGamma { index, value: g.to_f64() });
        }
    }
    let i = Complex::new(T::zero(), T::one());
    let mut out = rho.commutator(hamiltonian)?.scale(i);
    let half = T::from_f64(0.5);
    for (op, &g) in channels.operators().iter().zip(gamma) {
        if op.dim() != rho.dim() {
            return Err(Error::DimensionMismatch(format!(
                "lindblad_rhs: channel dim {} vs rho dim {}",
                op.dim(),
                rho.dim()
            )));
        }
        if g == T::zero() {
            continue;
        }
        let ldag = op.adjoint();
        let jump = op.matmul(rho)?.matmul(&ldag)?;
        let ldl = ldag.matmul(op)?;
        let anti = ldl.anticommutator(rho)?;
        out = out.add(&jump.sub(&anti.scale_re(half))?.scale_re(g))?;
    }
    Ok(out)
}

fn check_times<T: Real>(times: &[T]) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::InvalidConfig("need at least two sample times".to_string()));
    }
    if times[0] != T::zero() {
        return Err(Error::InvalidConfig("sample times must start at 0".to_string()));
    }
    for w in times.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidConfig(format!(
                "sample times must be strictly increasing ({} then {})",
                w[0].to_f64(),
                w[1].to_f64()
            )));
        }
    }
    Ok(())
}

/// Number of RK4 substeps used inside one output interval.
pub(crate) fn substeps<T: Real>(dt: T, t_final: T) -> usize {
    let target = t_final.to_f64() / RK4_DIVISIONS as f64;
    (dt.to_f64() / target).ceil().max(1.0) as usize
}

/// Integrates the master equation from `rho0`, sampling observable
/// expectation values at `times`. State invariants (trace, hermiticity,
/// positivity) are checked at every sampled time.
pub fn evolve<T: Real>(
    rho0: &DensityMatrix<T>,
    params: &ParameterSet<T>,
    channels: &ChannelSet<T>,
    times: &[T],
) -> Result<Trajectory<T>> {
    check_times(times)?;
    let basis = ObservableBasis::new(params.n_qubits());
    let hamiltonian = build_hamiltonian(params)?;
    let t_final = *times.last().expect("nonempty");

    let mut rho = rho0.matrix().clone();
    let mut values = Vec::with_capacity(basis.len() * times.len());
    let mut columns: Vec<Vec<T>> = Vec::with_capacity(times.len());
    columns.push(observable_vector(&rho, &basis, 0.0)?);
    validate_state(&rho, 0.0)?;

    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let n_sub = substeps(t1 - t0, t_final);
        let h = (t1 - t0) / T::from_f64(n_sub as f64);
        for _ in 0..n_sub {
            rho = rk4_step_matrix(&rho, h, &hamiltonian, channels, params.gamma())?;
        }
        validate_state(&rho, t1.to_f64())?;
        let obs = observable_vector(&rho, &basis, t1.to_f64())?;
        for &v in &obs {
            if v.to_f64().abs() > 1.0 + 1e-9 {
                return Err(Error::IntegrationFailure {
                    t: t1.to_f64(),
                    reason: format!("observable out of range: {}", v.to_f64()),
                });
            }
        }
        columns.push(obs);
    }

    // Transpose sample columns into row-major (observable, time) storage.
    for a in 0..basis.len() {
        for col in &columns {
            values.push(col[a]);
        }
    }
    Trajectory::new(times.to_vec(), values, basis.len())
}

fn rk4_step_matrix<T: Real>(
    rho: &ComplexMatrix<T>,
    h: T,
    hamiltonian: &ComplexMatrix<T>,
    channels: &ChannelSet<T>,
    gamma: &[T],
) -> Result<ComplexMatrix<T>> {
    let half = T::from_f64(0.5);
    let sixth = T::from_f64(1.0 / 6.0);
    let k1 = lindblad_rhs(rho, hamiltonian, channels, gamma)?;
    let k2 = lindblad_rhs(&rho.add(&k1.scale_re(h * half))?, hamiltonian, channels, gamma)?;
    let k3 = lindblad_rhs(&rho.add(&k2.scale_re(h * half))?, hamiltonian, channels, gamma)?;
    let k4 = lindblad_rhs(&rho.add(&k3.scale_re(h))?, hamiltonian, channels, gamma)?;
    let two = T::from_f64(2.0);
    let sum = k1
        .add(&k2.scale_re(two))?
        .add(&k3.scale_re(two))?
        .add(&k4)?;
    rho.add(&sum.scale_re(h * sixth))
}

/// Time grid plus the matrix of observable expectation values, one row per
/// observable, one column per time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Real> {
    times: Vec<T>,
    values: Vec<T>,
    n_obs: usize,
}

impl<T: Real> Trajectory<T> {
    pub fn new(times: Vec<T>, values: Vec<T>, n_obs: usize) -> Result<Self> {
        if values.len() != times.len() * n_obs {
            return Err(Error::DimensionMismatch(format!(
                "trajectory: {} values for {} times x {} observables",
                values.len(),
                times.len(),
                n_obs
            )));
        }
        Ok(Self { times, values, n_obs })
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn value(&self, obs: usize, k: usize) -> T {
        self.values[obs * self.times.len() + k]
    }

    pub fn row(&self, obs: usize) -> &[T] {
        &self.values[obs * self.times.len()..(obs + 1) * self.times.len()]
    }

    /// The observable vector at time index `k`.
    pub fn column(&self, k: usize) -> Vec<T> {
        (0..self.n_obs).map(|a| self.value(a, k)).collect()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn max_abs_diff(&self, other: &Trajectory<T>) -> T {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Equally spaced grid on `[0, t_final]` including both endpoints.
pub fn equally_spaced_times<T: Real>(n: usize, t_final: T) -> Vec<T> {
    assert!(n >= 2, "grid needs at least two points");
    (0..n)
        .map(|i| t_final * T::from_f64(i as f64 / (n - 1) as f64))
        .collect()
}

/// Adds i.i.d. `N(0, sigma^2)` draws to every entry. Deterministic for a
/// fixed seed; the input is left untouched.
pub fn add_gaussian_noise<T: Real>(traj: &Trajectory<T>, sigma: f64, seed: u64) -> Trajectory<T> {
    assert!(sigma >= 0.0, "noise level must be nonnegative");
    if sigma == 0.0 {
        return traj.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let values = traj
        .values
        .iter()
        .map(|&v| v + T::from_f64(normal.sample(&mut rng)))
        .collect();
    Trajectory { times: traj.times.clone(), values, n_obs: traj.n_obs }
}

/// Which parameters are trainable. Masked couplings and rates stay pinned
/// at zero, both when sampling ground truths and when fitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableMask {
    j: Vec<bool>,
    gamma: Vec<bool>,
}

impl TrainableMask {
    pub fn all_trainable(n_qubits: usize, n_channels: usize) -> Self {
        let slots = 4usize.pow(n_qubits as u32);
        let mut j = vec![true; slots];
        j[0] = false; // identity slot is never a parameter
        Self { j, gamma: vec![true; n_channels] }
    }

    pub fn with_j_disabled(mut self) -> Self {
        self.j.iter_mut().for_each(|b| *b = false);
        self
    }

    pub fn with_gamma_disabled(mut self) -> Self {
        self.gamma.iter_mut().for_each(|b| *b = false);
        self
    }

    pub fn set_j(&mut self, full_index: usize, trainable: bool) {
        assert!(full_index != 0, "identity slot is not a parameter");
        self.j[full_index] = trainable;
    }

    pub fn set_gamma(&mut self, channel: usize, trainable: bool) {
        self.gamma[channel] = trainable;
    }

    pub fn j(&self) -> &[bool] {
        &self.j
    }

    pub fn gamma(&self) -> &[bool] {
        &self.gamma
    }

    pub fn n_qubits(&self) -> usize {
        if self.j.len() == 4 {
            1
        } else {
            2
        }
    }
}

/// Draws a ground-truth parameter set: unmasked couplings uniform on
/// `[-omega0, omega0]`, unmasked rates uniform on `[0, omega0]`, masked
/// entries pinned to zero (no RNG draw is consumed for them).
pub fn sample_random_parameters<T: Real>(
    n_qubits: usize,
    seed: u64,
    mask: &TrainableMask,
    omega0: T,
) -> ParameterSet<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = 4usize.pow(n_qubits as u32);
    assert_eq!(mask.j().len(), slots, "mask does not match qubit count");
    let mut j = vec![T::zero(); slots];
    for (slot, value) in j.iter_mut().enumerate().skip(1) {
        if mask.j()[slot] {
            let u: f64 = rng.random();
            *value = omega0 * T::from_f64(2.0 * u - 1.0);
        }
    }
    let gamma = mask
        .gamma()
        .iter()
        .map(|&trainable| {
            if trainable {
                let u: f64 = rng.random();
                omega0 * T::from_f64(u)
            } else {
                T::zero()
            }
        })
        .collect();
    ParameterSet { n_qubits, j, gamma }
}
