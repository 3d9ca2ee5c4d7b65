//! Composite loss and the joint optimization of network weights and
//! physical parameters.
//!
//! The total loss is `lambda_m * L_m + lambda_d * L_d` where `L_m` sums the
//! squared physics residual `|s_dot - (A(theta) s + b(theta))|^2` over the
//! physics collocation grid and `L_d` sums the squared data mismatch over
//! the measured points. The network output is wrapped in the trial form
//! `s(t) = s0 + (t/T) * NN(t/T)`, so the initial condition holds exactly
//! and no initial-condition penalty is needed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::{
    observable_vector, plus_plus_state, ChannelSet, ParameterSet, TrainableMask, Trajectory,
};
use crate::liouvillian::{evolve_affine, GeneratorTemplate, RealMat};
use crate::metrics::mape;
use crate::net::{
    adam_step, backward_batch, forward_batch, init, AdamParams, AdamState, Activation, Gradients,
    NetConfig, NetState, Workspace,
};
use crate::pauli::ObservableBasis;
use crate::scalar::Real;

/// Squared physics residual of one state/derivative pair:
/// `sum_a (sdot_a - (A s + b)_a)^2`.
pub fn residual_sq_from_values<T: Real>(a: &RealMat<T>, b: &[T], s: &[T], sdot: &[T]) -> T {
    let m = b.len();
    let mut acc = T::zero();
    for p in 0..m {
        let mut as_p = b[p];
        let row = a.row(p);
        for q in 0..m {
            as_p += row[q] * s[q];
        }
        let r = sdot[p] - as_p;
        acc += r * r;
    }
    acc
}

/// `sum_a (predicted_a - observed_a)^2`.
pub fn mismatch_sq<T: Real>(predicted: &[T], observed: &[T]) -> T {
    predicted
        .iter()
        .zip(observed)
        .map(|(&p, &o)| (p - o) * (p - o))
        .fold(T::zero(), |acc, d| acc + d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<T: Real> {
    pub total: T,
    pub physics: T,
    pub data: T,
}

/// Maps the unconstrained `raw_phys` vector onto the physical parameters:
/// trainable couplings first (observable-basis order), then the raw decay
/// parameters with `gamma = r^2`. Masked parameters have no slot at all.
#[derive(Debug, Clone)]
pub struct PhysLayout {
    n_qubits: usize,
    n_channels: usize,
    j_slots: Vec<usize>,
    gamma_slots: Vec<usize>,
}

impl PhysLayout {
    pub fn new(mask: &TrainableMask, n_channels: usize) -> Self {
        let n_qubits = mask.n_qubits();
        assert_eq!(mask.gamma().len(), n_channels);
        let j_slots = mask.j()[1..]
            .iter()
            .enumerate()
            .filter_map(|(slot, &on)| on.then_some(slot))
            .collect();
        let gamma_slots = mask
            .gamma()
            .iter()
            .enumerate()
            .filter_map(|(k, &on)| on.then_some(k))
            .collect();
        Self { n_qubits, n_channels, j_slots, gamma_slots }
    }

    pub fn raw_len(&self) -> usize {
        self.j_slots.len() + self.gamma_slots.len()
    }

    pub fn n_trainable_j(&self) -> usize {
        self.j_slots.len()
    }

    pub fn j_slots(&self) -> &[usize] {
        &self.j_slots
    }

    pub fn gamma_slots(&self) -> &[usize] {
        &self.gamma_slots
    }

    /// Expands raw values into full coupling/rate vectors (masked entries
    /// exactly zero, `gamma = r^2`).
    pub fn unpack<T: Real>(&self, raw: &[T], j_obs: &mut [T], gamma: &mut [T]) {
        assert_eq!(raw.len(), self.raw_len());
        j_obs.iter_mut().for_each(|x| *x = T::zero());
        gamma.iter_mut().for_each(|x| *x = T::zero());
        for (i, &slot) in self.j_slots.iter().enumerate() {
            j_obs[slot] = raw[i];
        }
        let nj = self.j_slots.len();
        for (i, &k) in self.gamma_slots.iter().enumerate() {
            gamma[k] = raw[nj + i] * raw[nj + i];
        }
    }

    pub fn unpack_parameters<T: Real>(&self, raw: &[T]) -> ParameterSet<T> {
        let m = 4usize.pow(self.n_qubits as u32) - 1;
        let mut j_obs = vec![T::zero(); m];
        let mut gamma = vec![T::zero(); self.n_channels];
        self.unpack(raw, &mut j_obs, &mut gamma);
        let mut j = vec![T::zero(); m + 1];
        j[1..].copy_from_slice(&j_obs);
        ParameterSet::new(self.n_qubits, j, gamma).expect("unpacked parameters are valid")
    }

    /// Initialization policy: couplings start at zero; raw decay parameters
    /// start at `sqrt(0.1 * omega0)` so the dissipation gradient is alive.
    pub fn initial_raw<T: Real>(&self, omega0: T) -> Vec<T> {
        let mut raw = vec![T::zero(); self.raw_len()];
        let r0 = (T::from_f64(0.1) * omega0).sqrt();
        for slot in raw[self.j_slots.len()..].iter_mut() {
            *slot = r0;
        }
        raw
    }
}

/// Reusable buffers for loss evaluation.
#[derive(Debug, Clone)]
pub struct FitScratch<T: Real> {
    a_flat: Vec<T>,
    b: Vec<T>,
    j_obs: Vec<T>,
    gamma: Vec<T>,
    s: Vec<T>,
    sdot: Vec<T>,
    w: Vec<T>,
    atw: Vec<T>,
    r_mat: Vec<T>,
    rsum: Vec<T>,
    g_value: Vec<T>,
    g_dt: Vec<T>,
}

impl<T: Real> FitScratch<T> {
    fn new(m: usize, n_channels: usize, n_points: usize) -> Self {
        Self {
            a_flat: vec![T::zero(); m * m],
            b: vec![T::zero(); m],
            j_obs: vec![T::zero(); m],
            gamma: vec![T::zero(); n_channels],
            s: vec![T::zero(); m],
            sdot: vec![T::zero(); m],
            w: vec![T::zero(); m],
            atw: vec![T::zero(); m],
            r_mat: vec![T::zero(); m * m],
            rsum: vec![T::zero(); m],
            g_value: vec![T::zero(); n_points * m],
            g_dt: vec![T::zero(); n_points * m],
        }
    }
}

/// The fixed loss graph: physics residual on `N_t` collocation points plus
/// data mismatch on the measured grid, differentiable with respect to the
/// network and the raw physical parameters.
#[derive(Debug, Clone)]
pub struct PinnverseLoss<T: Real> {
    template: GeneratorTemplate<T>,
    layout: PhysLayout,
    t_final: T,
    tau_phys: Vec<T>,
    tau_data: Vec<T>,
    /// Row-major `[obs][data point]`, matching `Trajectory`.
    data_values: Vec<T>,
    s0: Vec<T>,
    pub lambda_m: T,
    pub lambda_d: T,
}

impl<T: Real> PinnverseLoss<T> {
    pub fn new(
        template: GeneratorTemplate<T>,
        mask: &TrainableMask,
        data: &Trajectory<T>,
        n_t: usize,
        t_final: T,
        lambda_m: T,
        lambda_d: T,
    ) -> Result<Self> {
        let m = template.dim();
        if data.n_obs() != m {
            return Err(Error::DimensionMismatch(format!(
                "data has {} observables, generator expects {m}",
                data.n_obs()
            )));
        }
        if n_t < 2 {
            return Err(Error::InvalidConfig("need at least two physics points".to_string()));
        }
        if data.n_times() < 1 {
            return Err(Error::InvalidConfig("need at least one data point".to_string()));
        }
        for &t in data.times() {
            if t < T::zero() || t > t_final * T::from_f64(1.0 + 1e-12) {
                return Err(Error::InvalidConfig(format!(
                    "data time {} outside [0, {}]",
                    t.to_f64(),
                    t_final.to_f64()
                )));
            }
        }
        let layout = PhysLayout::new(mask, template.n_channels());
        let tau_phys = (0..n_t)
            .map(|i| T::from_f64(i as f64 / (n_t - 1) as f64))
            .collect();
        let tau_data = data.times().iter().map(|&t| t / t_final).collect();
        let basis = ObservableBasis::new(template.n_qubits());
        let s0 = observable_vector(
            plus_plus_state::<T>(template.n_qubits()).matrix(),
            &basis,
            0.0,
        )?;
        Ok(Self {
            template,
            layout,
            t_final,
            tau_phys,
            tau_data,
            data_values: data.values().to_vec(),
            s0,
            lambda_m,
            lambda_d,
        })
    }

    pub fn layout(&self) -> &PhysLayout {
        &self.layout
    }

    pub fn template(&self) -> &GeneratorTemplate<T> {
        &self.template
    }

    pub fn n_points(&self) -> usize {
        self.tau_phys.len() + self.tau_data.len()
    }

    pub fn n_phys(&self) -> usize {
        self.tau_phys.len()
    }

    pub fn n_data(&self) -> usize {
        self.tau_data.len()
    }

    fn dim(&self) -> usize {
        self.s0.len()
    }

    pub fn make_workspace(&self, state: &NetState<T>) -> Workspace<T> {
        Workspace::new(state, self.n_points())
    }

    pub fn make_scratch(&self) -> FitScratch<T> {
        FitScratch::new(self.dim(), self.template.n_channels(), self.n_points())
    }

    fn all_taus(&self) -> Vec<T> {
        let mut taus = self.tau_phys.clone();
        taus.extend_from_slice(&self.tau_data);
        taus
    }

    fn check_state(&self, state: &NetState<T>) -> Result<()> {
        if state.output_dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "network output dim {} vs observable count {}",
                state.output_dim(),
                self.dim()
            )));
        }
        if state.raw_phys.len() != self.layout.raw_len() {
            return Err(Error::ShapeMismatch(format!(
                "raw_phys length {} vs layout {}",
                state.raw_phys.len(),
                self.layout.raw_len()
            )));
        }
        Ok(())
    }

    fn assemble(&self, state: &NetState<T>, scratch: &mut FitScratch<T>) {
        let raw = &state.raw_phys;
        let (j_obs, gamma) = (&mut scratch.j_obs, &mut scratch.gamma);
        self.layout.unpack(raw, j_obs, gamma);
        self.template.assemble_into(j_obs, gamma, &mut scratch.a_flat, &mut scratch.b);
    }

    /// Trial form and residual at one forwarded point; returns the squared
    /// residual contribution.
    fn point_residual(
        &self,
        tau: T,
        value: &[T],
        dt: &[T],
        scratch: &mut FitScratch<T>,
    ) -> T {
        let m = self.dim();
        let inv_t = T::one() / self.t_final;
        for a in 0..m {
            scratch.s[a] = self.s0[a] + tau * value[a];
            scratch.sdot[a] = (value[a] + tau * dt[a]) * inv_t;
        }
        let mut acc = T::zero();
        for p in 0..m {
            let mut as_p = scratch.b[p];
            let row = &scratch.a_flat[p * m..(p + 1) * m];
            for q in 0..m {
                as_p += row[q] * scratch.s[q];
            }
            let r = scratch.sdot[p] - as_p;
            scratch.w[p] = r;
            acc += r * r;
        }
        acc
    }

    /// Loss value only (no gradients).
    pub fn loss(
        &self,
        state: &NetState<T>,
        ws: &mut Workspace<T>,
        scratch: &mut FitScratch<T>,
    ) -> Result<LossParts<T>> {
        self.check_state(state)?;
        let taus = self.all_taus();
        forward_batch(state, &taus, ws);
        self.assemble(state, scratch);
        let m = self.dim();

        let mut physics = T::zero();
        for (j, &tau) in self.tau_phys.iter().enumerate() {
            let value = &ws.value[j * m..(j + 1) * m];
            let dt = &ws.dt[j * m..(j + 1) * m];
            // borrow dance: copy slices out of ws before mutating scratch
            let (v, d): (Vec<T>, Vec<T>) = (value.to_vec(), dt.to_vec());
            physics += self.point_residual(tau, &v, &d, scratch);
        }

        let n_t = self.tau_phys.len();
        let n_c = self.tau_data.len();
        let mut data = T::zero();
        for (n, &tau) in self.tau_data.iter().enumerate() {
            let value = &ws.value[(n_t + n) * m..(n_t + n + 1) * m];
            for a in 0..m {
                let predicted = self.s0[a] + tau * value[a];
                let y = self.data_values[a * n_c + n];
                let e = predicted - y;
                data += e * e;
            }
        }

        Ok(LossParts {
            total: self.lambda_m * physics + self.lambda_d * data,
            physics,
            data,
        })
    }

    /// Loss and exact reverse-mode gradients for every weight, bias and raw
    /// physical parameter. `d_gamma_out`, when given, receives the
    /// intermediate `dL/d gamma_k` (before the `gamma = r^2` chain rule),
    /// one entry per trainable channel.
    pub fn backward(
        &self,
        state: &NetState<T>,
        ws: &mut Workspace<T>,
        scratch: &mut FitScratch<T>,
        grads: &mut Gradients<T>,
        mut d_gamma_out: Option<&mut Vec<T>>,
    ) -> Result<LossParts<T>> {
        self.check_state(state)?;
        let taus = self.all_taus();
        forward_batch(state, &taus, ws);
        self.assemble(state, scratch);
        grads.clear();

        let m = self.dim();
        let n_t = self.tau_phys.len();
        let n_c = self.tau_data.len();
        let inv_t = T::one() / self.t_final;
        let two = T::from_f64(2.0);

        scratch.r_mat.iter_mut().for_each(|x| *x = T::zero());
        scratch.rsum.iter_mut().for_each(|x| *x = T::zero());
        scratch.g_value.iter_mut().for_each(|x| *x = T::zero());
        scratch.g_dt.iter_mut().for_each(|x| *x = T::zero());

        let mut physics = T::zero();
        for (j, &tau) in self.tau_phys.iter().enumerate() {
            let (v, d): (Vec<T>, Vec<T>) = {
                let value = &ws.value[j * m..(j + 1) * m];
                let dt = &ws.dt[j * m..(j + 1) * m];
                (value.to_vec(), dt.to_vec())
            };
            physics += self.point_residual(tau, &v, &d, scratch);
            // scratch.w now holds the raw residual; weight it.
            let lm2 = two * self.lambda_m;
            for p in 0..m {
                scratch.w[p] = lm2 * scratch.w[p];
            }
            // A^T w
            for q in 0..m {
                scratch.atw[q] = T::zero();
            }
            for p in 0..m {
                let wp = scratch.w[p];
                let row = &scratch.a_flat[p * m..(p + 1) * m];
                for q in 0..m {
                    scratch.atw[q] += row[q] * wp;
                }
            }
            let gv = &mut scratch.g_value[j * m..(j + 1) * m];
            let gd = &mut scratch.g_dt[j * m..(j + 1) * m];
            for a in 0..m {
                gv[a] = scratch.w[a] * inv_t - tau * scratch.atw[a];
                gd[a] = tau * inv_t * scratch.w[a];
            }
            // R += w s^T, rsum += w (for the parameter gradients)
            for p in 0..m {
                let wp = scratch.w[p];
                scratch.rsum[p] += wp;
                let row = &mut scratch.r_mat[p * m..(p + 1) * m];
                for q in 0..m {
                    row[q] += wp * scratch.s[q];
                }
            }
        }

        let mut data = T::zero();
        let ld2 = two * self.lambda_d;
        for (n, &tau) in self.tau_data.iter().enumerate() {
            let idx = n_t + n;
            let value = &ws.value[idx * m..(idx + 1) * m];
            let gv = &mut scratch.g_value[idx * m..(idx + 1) * m];
            for a in 0..m {
                let predicted = self.s0[a] + tau * value[a];
                let e = predicted - self.data_values[a * n_c + n];
                data += e * e;
                gv[a] = ld2 * tau * e;
            }
        }

        backward_batch(state, ws, &scratch.g_value, &scratch.g_dt, grads);

        // Physical-parameter gradients through dA/dtheta and db/dtheta.
        let nj = self.layout.j_slots.len();
        for (i, &slot) in self.layout.j_slots.iter().enumerate() {
            let da = self.template.j_grad(slot);
            let mut acc = T::zero();
            for (x, y) in da.data().iter().zip(&scratch.r_mat) {
                acc += *x * *y;
            }
            grads.raw_phys[i] = -acc;
        }
        if let Some(dg) = d_gamma_out.as_deref_mut() {
            dg.clear();
        }
        for (i, &k) in self.layout.gamma_slots.iter().enumerate() {
            let (da, db) = self.template.gamma_grad(k);
            let mut acc = T::zero();
            for (x, y) in da.data().iter().zip(&scratch.r_mat) {
                acc += *x * *y;
            }
            for (x, y) in db.iter().zip(&scratch.rsum) {
                acc += *x * *y;
            }
            let d_gamma = -acc;
            if let Some(dg) = d_gamma_out.as_deref_mut() {
                dg.push(d_gamma);
            }
            let r_k = state.raw_phys[nj + i];
            grads.raw_phys[nj + i] = two * r_k * d_gamma;
        }

        Ok(LossParts {
            total: self.lambda_m * physics + self.lambda_d * data,
            physics,
            data,
        })
    }
}

/// Physics residual summed over `n_t` equally spaced collocation points.
pub fn physics_loss<T: Real>(
    state: &NetState<T>,
    template: &GeneratorTemplate<T>,
    mask: &TrainableMask,
    n_t: usize,
    t_final: T,
) -> Result<T> {
    // A dummy single data point at t = 0 contributes nothing (tau = 0 is
    // pinned by the trial form) but keeps the driver shape uniform.
    let m = template.dim();
    let basis = ObservableBasis::new(template.n_qubits());
    let s0 = observable_vector(plus_plus_state::<T>(template.n_qubits()).matrix(), &basis, 0.0)?;
    let data = Trajectory::new(vec![T::zero()], s0, m)?;
    let loss =
        PinnverseLoss::new(template.clone(), mask, &data, n_t, t_final, T::one(), T::zero())?;
    let mut ws = loss.make_workspace(state);
    let mut scratch = loss.make_scratch();
    Ok(loss.loss(state, &mut ws, &mut scratch)?.physics)
}

/// Squared data mismatch of the trial-form network against a trajectory.
pub fn data_loss<T: Real>(
    state: &NetState<T>,
    template: &GeneratorTemplate<T>,
    mask: &TrainableMask,
    data: &Trajectory<T>,
    t_final: T,
) -> Result<T> {
    let loss =
        PinnverseLoss::new(template.clone(), mask, data, 2, t_final, T::zero(), T::one())?;
    let mut ws = loss.make_workspace(state);
    let mut scratch = loss.make_scratch();
    Ok(loss.loss(state, &mut ws, &mut scratch)?.data)
}

#[derive(Debug, Clone)]
pub struct FitConfig<T: Real> {
    pub n_t: usize,
    pub t_final: T,
    pub max_steps: usize,
    pub lr0: T,
    pub lr_decay: T,
    pub lr_decay_every: usize,
    pub lambda_m: T,
    pub lambda_d: T,
    pub mask: TrainableMask,
    pub restarts: usize,
    pub seed: u64,
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub log_every: usize,
}

impl<T: Real> FitConfig<T> {
    pub fn new(n_qubits: usize, n_channels: usize, t_final: T) -> Self {
        Self {
            n_t: 200,
            t_final,
            max_steps: 30_000,
            lr0: T::from_f64(2e-3),
            lr_decay: T::from_f64(0.5),
            lr_decay_every: 5_000,
            lambda_m: T::one(),
            lambda_d: T::one(),
            mask: TrainableMask::all_trainable(n_qubits, n_channels),
            restarts: 4,
            seed: 0,
            plateau_window: 2_000,
            plateau_rel_tol: 1e-10,
            hidden: vec![32, 32, 32],
            activation: Activation::Tanh,
            log_every: 100,
        }
    }

    pub fn two_qubit() -> Self {
        Self::new(2, 4, T::one())
    }

    fn validate(&self) -> Result<()> {
        if self.n_t < 2 {
            return Err(Error::InvalidConfig("n_t must be at least 2".to_string()));
        }
        if self.max_steps == 0 || self.restarts == 0 {
            return Err(Error::InvalidConfig(
                "max_steps and restarts must be positive".to_string(),
            ));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".to_string()));
        }
        Ok(())
    }

    /// Frequency unit: `omega0 = 2 pi / T`.
    pub fn omega0(&self) -> T {
        T::from_f64(std::f64::consts::TAU) / self.t_final
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecoveredParams {
    /// Full-index layout (identity slot first, pinned to zero).
    pub j: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl RecoveredParams {
    pub fn from_parameter_set<T: Real>(p: &ParameterSet<T>) -> Self {
        Self {
            j: p.j().iter().map(|x| x.to_f64()).collect(),
            gamma: p.gamma().iter().map(|x| x.to_f64()).collect(),
        }
    }

    pub fn to_parameter_set<T: Real>(&self, n_qubits: usize) -> Result<ParameterSet<T>> {
        ParameterSet::new(
            n_qubits,
            self.j.iter().map(|&x| T::from_f64(x)).collect(),
            self.gamma.iter().map(|&x| T::from_f64(x)).collect(),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossSample {
    pub step: usize,
    pub total: f64,
    pub physics: f64,
    pub data: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RestartRecord {
    pub seed: u64,
    pub ok: bool,
    pub failure: Option<String>,
    pub steps_run: usize,
    pub final_total: f64,
    pub final_physics: f64,
    pub final_data: f64,
    pub recovered: RecoveredParams,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParameterErrors {
    pub j_abs: Vec<f64>,
    /// Relative error per coupling; `None` where the reference is zero.
    pub j_pct: Vec<Option<f64>>,
    pub gamma_abs: Vec<f64>,
    pub gamma_pct: Vec<Option<f64>>,
    pub mape_j: Option<f64>,
    pub mape_gamma: Option<f64>,
    pub mape_gamma_each: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryData {
    pub times: Vec<f64>,
    /// One row per observable.
    pub values: Vec<Vec<f64>>,
}

impl TrajectoryData {
    pub fn from_trajectory<T: Real>(traj: &Trajectory<T>) -> Self {
        Self {
            times: traj.times().iter().map(|x| x.to_f64()).collect(),
            values: (0..traj.n_obs())
                .map(|a| traj.row(a).iter().map(|x| x.to_f64()).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitConfigEcho {
    pub n_t: usize,
    pub n_c: usize,
    pub t_final: f64,
    pub max_steps: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub restarts: usize,
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
    pub trainable_j: Vec<bool>,
    pub trainable_gamma: Vec<bool>,
}

pub const FIT_REPORT_FORMAT: &str = "fit-report-v1";

/// Everything a fit produces, serializable as JSON. `wall_seconds` is the
/// only nondeterministic field; [`FitReport::to_json_deterministic`] zeroes
/// it for bit-exact comparisons.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitReport {
    pub format: String,
    pub n_qubits: usize,
    pub channel_labels: Vec<String>,
    pub seeds: Vec<u64>,
    pub best_restart: usize,
    pub recovered: RecoveredParams,
    pub restarts: Vec<RestartRecord>,
    pub loss_history: Vec<LossSample>,
    pub truth: Option<RecoveredParams>,
    pub errors: Option<ParameterErrors>,
    pub reconstruction: Option<TrajectoryData>,
    pub config: FitConfigEcho,
    pub wall_seconds: f64,
}

impl FitReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn to_json_deterministic(&self) -> String {
        let mut clone = self.clone();
        clone.wall_seconds = 0.0;
        serde_json::to_string_pretty(&clone).expect("report serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    /// Recovered parameter sets from every successful restart, for
    /// min/max error bars.
    pub fn ok_restart_params(&self) -> Vec<&RecoveredParams> {
        self.restarts.iter().filter(|r| r.ok).map(|r| &r.recovered).collect()
    }

    /// Fills `truth`, per-parameter errors and group MAPEs. Masked (always
    /// zero) entries are excluded from the MAPE denominators.
    pub fn attach_truth(&mut self, truth: &RecoveredParams) {
        let j_abs: Vec<f64> = self
            .recovered
            .j
            .iter()
            .zip(&truth.j)
            .map(|(p, t)| (p - t).abs())
            .collect();
        let j_pct = self
            .recovered
            .j
            .iter()
            .zip(&truth.j)
            .map(|(p, t)| (*t != 0.0).then(|| ((p - t) / t).abs()))
            .collect();
        let gamma_abs: Vec<f64> = self
            .recovered
            .gamma
            .iter()
            .zip(&truth.gamma)
            .map(|(p, t)| (p - t).abs())
            .collect();
        let gamma_pct: Vec<Option<f64>> = self
            .recovered
            .gamma
            .iter()
            .zip(&truth.gamma)
            .map(|(p, t)| (*t != 0.0).then(|| ((p - t) / t).abs()))
            .collect();
        let mape_j = mape(&truth.j[1..], &self.recovered.j[1..]).ok();
        let mape_gamma = mape(&truth.gamma, &self.recovered.gamma).ok();
        let mape_gamma_each = truth
            .gamma
            .iter()
            .zip(&self.recovered.gamma)
            .map(|(t, p)| mape(&[*t], &[*p]).ok())
            .collect();
        self.truth = Some(truth.clone());
        self.errors = Some(ParameterErrors {
            j_abs,
            j_pct,
            gamma_abs,
            gamma_pct,
            mape_j,
            mape_gamma,
            mape_gamma_each,
        });
    }
}

/// Evolves the recovered parameters from the canonical initial state; used
/// for every reconstruction-error metric.
pub fn reconstruct<T: Real>(
    params: &ParameterSet<T>,
    channels: &ChannelSet<T>,
    times: &[T],
) -> Result<Trajectory<T>> {
    let basis = ObservableBasis::new(params.n_qubits());
    let template = GeneratorTemplate::new(&basis, channels)?;
    let (a, b) = template.assemble(params);
    let s0 = observable_vector(plus_plus_state::<T>(params.n_qubits()).matrix(), &basis, 0.0)?;
    evolve_affine(&a, &b, &s0, times)
}

struct RestartOutcome<T: Real> {
    seed: u64,
    ok: bool,
    failure: Option<String>,
    steps_run: usize,
    final_parts: LossParts<T>,
    recovered: ParameterSet<T>,
    history: Vec<LossSample>,
}

fn run_restart<T: Real>(
    loss: &PinnverseLoss<T>,
    config: &FitConfig<T>,
    seed: u64,
) -> RestartOutcome<T> {
    let mut net_config = NetConfig::new(loss.dim(), config.hidden.clone(), seed);
    net_config.activation = config.activation;
    net_config.raw_phys_init = loss.layout().initial_raw(config.omega0());
    let mut state = init(&net_config);

    let mut ws = loss.make_workspace(&state);
    let mut scratch = loss.make_scratch();
    let mut grads = Gradients::zeros_like(&state);
    let mut opt = AdamState::new(&state);

    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stall = 0usize;
    let mut steps_run = 0usize;
    let mut failure: Option<String> = None;

    for step in 0..config.max_steps {
        let parts = match loss.backward(&state, &mut ws, &mut scratch, &mut grads, None) {
            Ok(p) => p,
            Err(e) => {
                failure = Some(format!("step {step}: {e}"));
                break;
            }
        };
        let total = parts.total.to_f64();
        if !total.is_finite() {
            failure = Some(format!("step {step}: loss diverged ({total})"));
            break;
        }
        if step % config.log_every == 0 {
            history.push(LossSample {
                step,
                total,
                physics: parts.physics.to_f64(),
                data: parts.data.to_f64(),
            });
        }
        // Plateau stop: no relative improvement over the window.
        if best - total > self_rel(best) * config.plateau_rel_tol {
            best = total;
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.plateau_window {
                steps_run = step;
                break;
            }
        }
        let decays = (step / config.lr_decay_every) as i32;
        let lr = config.lr0 * config.lr_decay.powi(decays);
        let hp = AdamParams::with_lr(lr);
        if let Err(e) = adam_step(&mut state, &grads, &mut opt, &hp) {
            failure = Some(format!("step {step}: {e}"));
            break;
        }
        steps_run = step + 1;
    }

    let final_parts = if failure.is_none() {
        match loss.loss(&state, &mut ws, &mut scratch) {
            Ok(p) => {
                if !p.total.to_f64().is_finite() {
                    failure = Some("final loss not finite".to_string());
                }
                p
            }
            Err(e) => {
                failure = Some(format!("final evaluation: {e}"));
                LossParts { total: T::infinity(), physics: T::infinity(), data: T::infinity() }
            }
        }
    } else {
        LossParts { total: T::infinity(), physics: T::infinity(), data: T::infinity() }
    };

    if failure.is_none() {
        history.push(LossSample {
            step: steps_run,
            total: final_parts.total.to_f64(),
            physics: final_parts.physics.to_f64(),
            data: final_parts.data.to_f64(),
        });
    }

    let recovered = loss.layout().unpack_parameters(&state.raw_phys);
    RestartOutcome {
        seed,
        ok: failure.is_none(),
        failure,
        steps_run,
        final_parts,
        recovered,
        history,
    }
}

fn self_rel(best: f64) -> f64 {
    if best.is_finite() {
        best.abs().max(1e-300)
    } else {
        f64::MAX
    }
}

/// Runs `restarts` independent trainings (seeds `config.seed + r`) and
/// returns the report of the lowest final total loss, retaining every
/// restart's recovered parameters. Failed restarts are recorded and
/// excluded; the fit errors only if all of them fail.
pub fn fit<T: Real>(
    data: &Trajectory<T>,
    channels: &ChannelSet<T>,
    config: &FitConfig<T>,
) -> Result<FitReport> {
    config.validate()?;
    let started = std::time::Instant::now();
    let n_qubits = match data.n_obs() {
        3 => 1,
        15 => 2,
        other => {
            return Err(Error::DimensionMismatch(format!(
                "trajectory has {other} observables, expected 3 or 15"
            )))
        }
    };
    let basis = ObservableBasis::new(n_qubits);
    let template = GeneratorTemplate::new(&basis, channels)?;
    let loss = PinnverseLoss::new(
        template,
        &config.mask,
        data,
        config.n_t,
        config.t_final,
        config.lambda_m,
        config.lambda_d,
    )?;

    let seeds: Vec<u64> = (0..config.restarts).map(|r| config.seed.wrapping_add(r as u64)).collect();
    let outcomes: Vec<RestartOutcome<T>> = seeds
        .par_iter()
        .map(|&seed| run_restart(&loss, config, seed))
        .collect();

    let best_restart = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.ok)
        .min_by(|(_, a), (_, b)| {
            a.final_parts
                .total
                .to_f64()
                .partial_cmp(&b.final_parts.total.to_f64())
                .expect("finite totals")
        })
        .map(|(i, _)| i)
        .ok_or(Error::AllRestartsFailed(config.restarts))?;

    let best = &outcomes[best_restart];
    let recovered = RecoveredParams::from_parameter_set(&best.recovered);
    let reconstruction = reconstruct(&best.recovered, channels, data.times())
        .ok()
        .map(|traj| TrajectoryData::from_trajectory(&traj));

    let report = FitReport {
        format: FIT_REPORT_FORMAT.to_string(),
        n_qubits,
        channel_labels: channels.labels().to_vec(),
        seeds,
        best_restart,
        recovered,
        restarts: outcomes
            .iter()
            .map(|o| RestartRecord {
                seed: o.seed,
                ok: o.ok,
                failure: o.failure.clone(),
                steps_run: o.steps_run,
                final_total: o.final_parts.total.to_f64(),
                final_physics: o.final_parts.physics.to_f64(),
                final_data: o.final_parts.data.to_f64(),
                recovered: RecoveredParams::from_parameter_set(&o.recovered),
            })
            .collect(),
        loss_history: best.history.clone(),
        truth: None,
        errors: None,
        reconstruction,
        config: FitConfigEcho {
            n_t: config.n_t,
            n_c: data.n_times(),
            t_final: config.t_final.to_f64(),
            max_steps: config.max_steps,
            lr0: config.lr0.to_f64(),
            lr_decay: config.lr_decay.to_f64(),
            lr_decay_every: config.lr_decay_every,
            lambda_m: config.lambda_m.to_f64(),
            lambda_d: config.lambda_d.to_f64(),
            hidden: config.hidden.clone(),
            activation: config.activation.name().to_string(),
            restarts: config.restarts,
            plateau_window: config.plateau_window,
            plateau_rel_tol: config.plateau_rel_tol,
            trainable_j: config.mask.j().to_vec(),
            trainable_gamma: config.mask.gamma().to_vec(),
        },
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::{
        add_gaussian_noise, equally_spaced_times, evolve, sample_random_parameters,
    };
    use crate::liouvillian::build_generator;

    const TAU2: f64 = std::f64::consts::TAU;

    fn two_qubit_template() -> GeneratorTemplate<f64> {
        let basis = ObservableBasis::new(2);
        GeneratorTemplate::new(&basis, &ChannelSet::two_qubit_standard()).unwrap()
    }

    #[test]
    fn residual_kernel_exact_solution() {
        // Values and derivatives taken from the generator itself give a
        // vanishing residual.
        let mask = TrainableMask::all_trainable(2, 4);
        let params = sample_random_parameters::<f64>(2, 5, &mask, TAU2);
        let channels = ChannelSet::two_qubit_standard();
        let basis = ObservableBasis::new(2);
        let gen = build_generator(&params, &channels, &basis).unwrap();
        let times = equally_spaced_times(30, 1.0);
        let traj = evolve(&plus_plus_state(2), &params, &channels, &times).unwrap();
        let mut worst = 0.0f64;
        for k in 0..traj.n_times() {
            let s = traj.column(k);
            let sdot = crate::liouvillian::rhs(&gen, &s).unwrap();
            worst = worst.max(residual_sq_from_values(&gen.a, &gen.b, &s, &sdot));
        }
        assert!(worst < 1e-10, "residual of exact solution {worst:.3e}");
    }

    #[test]
    fn residual_kernel_quadratic_in_perturbation() {
        // Perturbing one coupling by delta grows the residual of the true
        // trajectory quadratically.
        let mask = TrainableMask::all_trainable(2, 4);
        let params = sample_random_parameters::<f64>(2, 9, &mask, TAU2);
        let channels = ChannelSet::two_qubit_standard();
        let basis = ObservableBasis::new(2);
        let gen = build_generator(&params, &channels, &basis).unwrap();
        let times = equally_spaced_times(20, 1.0);
        let traj = evolve(&plus_plus_state(2), &params, &channels, &times).unwrap();

        let loss_at = |delta: f64| -> f64 {
            let mut j = params.j().to_vec();
            j[6] += delta; // perturb J_{1,2}
            let p = ParameterSet::new(2, j, params.gamma().to_vec()).unwrap();
            let perturbed = build_generator(&p, &channels, &basis).unwrap();
            (0..traj.n_times())
                .map(|k| {
                    let s = traj.column(k);
                    let sdot = crate::liouvillian::rhs(&gen, &s).unwrap();
                    residual_sq_from_values(&perturbed.a, &perturbed.b, &s, &sdot)
                })
                .sum()
        };
        let delta = 1e-3;
        let (l1, l2) = (loss_at(delta), loss_at(2.0 * delta));
        assert!(
            (l2 / l1 - 4.0).abs() < 0.05 * 4.0,
            "quadratic growth violated: ratio {}",
            l2 / l1
        );
    }

    #[test]
    fn physics_loss_zero_for_frozen_dynamics() {
        // Zero net + zero parameters: s stays at s0, which solves the
        // frozen dynamics exactly.
        let template = two_qubit_template();
        let mask = TrainableMask::all_trainable(2, 4);
        let layout = PhysLayout::new(&mask, 4);
        let mut config = NetConfig::<f64>::new(15, vec![8], 3);
        config.raw_phys_init = vec![0.0; layout.raw_len()];
        let mut state = init(&config);
        let last = state.layers.len() - 1;
        state.layers[last].w.iter_mut().for_each(|w| *w = 0.0);
        state.layers[last].b.iter_mut().for_each(|b| *b = 0.0);

        let value = physics_loss(&state, &template, &mask, 50, 1.0).unwrap();
        assert!(value.abs() < 1e-20, "frozen-dynamics residual {value:.3e}");
    }

    #[test]
    fn data_loss_cases() {
        let clean = [0.3f64, -0.2, 0.9];
        let offset = [0.3f64, -0.1, 0.9];
        assert_eq!(mismatch_sq(&clean, &clean), 0.0);
        let d = mismatch_sq(&offset, &clean);
        assert!((d - 0.01).abs() < 1e-15, "single offset of 0.1 gives 0.01");
    }

    #[test]
    fn data_loss_noise_concentration() {
        // Clean values vs their noisy copies: the mismatch concentrates
        // near (15 * N_c) * sigma^2 within 3 chi^2 standard deviations.
        let sigma = 0.02;
        let n_c = 50;
        let times = equally_spaced_times(n_c, 1.0);
        let mask = TrainableMask::all_trainable(2, 4);
        let params = sample_random_parameters::<f64>(2, 33, &mask, TAU2);
        let channels = ChannelSet::two_qubit_standard();
        let clean = evolve(&plus_plus_state(2), &params, &channels, &times).unwrap();
        let noisy = add_gaussian_noise(&clean, sigma, 404);
        let loss = mismatch_sq(clean.values(), noisy.values());
        let dof = (15 * n_c) as f64;
        let mean = dof * sigma * sigma;
        let sd = (2.0 * dof).sqrt() * sigma * sigma;
        assert!(
            (loss - mean).abs() < 3.0 * sd,
            "chi^2 concentration violated: {loss} vs {mean} +- {sd}"
        );
    }

    #[test]
    fn loss_additivity() {
        let template = two_qubit_template();
        let mask = TrainableMask::all_trainable(2, 4);
        let layout = PhysLayout::new(&mask, 4);
        let times = equally_spaced_times(10, 1.0);
        let params = sample_random_parameters::<f64>(2, 2, &mask, TAU2);
        let channels = ChannelSet::two_qubit_standard();
        let data = evolve(&plus_plus_state(2), &params, &channels, &times).unwrap();

        let loss = PinnverseLoss::new(template, &mask, &data, 20, 1.0, 0.7, 1.3).unwrap();
        let mut config = NetConfig::<f64>::new(15, vec![8, 8], 5);
        config.raw_phys_init = layout.initial_raw(TAU2);
        let state = init(&config);
        let mut ws = loss.make_workspace(&state);
        let mut scratch = loss.make_scratch();
        let parts = loss.loss(&state, &mut ws, &mut scratch).unwrap();
        assert_eq!(parts.total, 0.7 * parts.physics + 1.3 * parts.data);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        // Covers weights, biases, couplings and raw decay parameters on
        // three different configurations.
        let cases: [(u64, Vec<usize>, usize); 3] =
            [(11, vec![6], 10), (12, vec![5, 5], 8), (13, vec![4, 4, 4], 12)];
        for (seed, hidden, n_t) in cases {
            let template = two_qubit_template();
            let mask = TrainableMask::all_trainable(2, 4);
            let layout = PhysLayout::new(&mask, 4);
            let times = equally_spaced_times(6, 1.0);
            let params = sample_random_parameters::<f64>(2, seed, &mask, TAU2);
            let channels = ChannelSet::two_qubit_standard();
            let data = evolve(&plus_plus_state(2), &params, &channels, &times).unwrap();
            let noisy = add_gaussian_noise(&data, 0.01, seed);

            let loss =
                PinnverseLoss::new(template, &mask, &noisy, n_t, 1.0, 1.0, 1.0).unwrap();
            let mut config = NetConfig::<f64>::new(15, hidden, seed);
            config.raw_phys_init = layout.initial_raw(TAU2);
            // Move raw parameters off their init so gradients are generic.
            let mut state = init(&config);
            for (i, r) in state.raw_phys.iter_mut().enumerate() {
                *r += 0.05 * (i as f64 + 1.0) / 10.0;
            }

            let mut ws = loss.make_workspace(&state);
            let mut scratch = loss.make_scratch();
            let mut grads = Gradients::zeros_like(&state);
            loss.backward(&state, &mut ws, &mut scratch, &mut grads, None).unwrap();
            let flat_grad = grads.flatten();

            let objective = |s: &NetState<f64>| -> f64 {
                let mut ws = loss.make_workspace(s);
                let mut scratch = loss.make_scratch();
                loss.loss(s, &mut ws, &mut scratch).unwrap().total
            };

            let flat = state.flatten_params();
            let h = 1e-5;
            for i in 0..flat.len() {
                let mut plus = state.clone();
                let mut minus = state.clone();
                let mut fp = flat.clone();
                fp[i] += h;
                plus.set_from_flat(&fp);
                fp[i] -= 2.0 * h;
                minus.set_from_flat(&fp);
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let err = (flat_grad[i] - fd).abs();
                let tol = (1e-4 * fd.abs().max(flat_grad[i].abs())).max(1e-8);
                assert!(
                    err <= tol,
                    "case {seed}, param {i}: grad {} vs fd {fd} (err {err:.3e})",
                    flat_grad[i]
                );
            }
        }
    }

    #[test]
    fn gamma_reparametrization_chain_rule() {
        let template = two_qubit_template();
        let mask = TrainableMask::all_trainable(2, 4);
        let layout = PhysLayout::new(&mask, 4);
        let times = equally_spaced_times(8, 1.0);
        let params = sample_random_parameters::<f64>(2, 6, &mask, TAU2);
        let channels = ChannelSet::two_qubit_standard();
        let data = evolve(&plus_plus_state(2), &params, &channels, &times).unwrap();

        let loss = PinnverseLoss::new(template, &mask, &data, 12, 1.0, 1.0, 1.0).unwrap();
        let mut config = NetConfig::<f64>::new(15, vec![6, 6], 21);
        config.raw_phys_init = layout.initial_raw(TAU2);
        let state = init(&config);

        let mut ws = loss.make_workspace(&state);
        let mut scratch = loss.make_scratch();
        let mut grads = Gradients::zeros_like(&state);
        let mut d_gamma = Vec::new();
        loss.backward(&state, &mut ws, &mut scratch, &mut grads, Some(&mut d_gamma)).unwrap();

        let nj = layout.n_trainable_j();
        for (i, &dg) in d_gamma.iter().enumerate() {
            let r_k = state.raw_phys[nj + i];
            let expect = 2.0 * r_k * dg;
            assert!(
                (grads.raw_phys[nj + i] - expect).abs() <= 1e-10,
                "chain rule broken for channel {i}"
            );
        }
    }

    #[test]
    fn masked_parameters_absent_from_gradients() {
        let template = two_qubit_template();
        let mut mask = TrainableMask::all_trainable(2, 4);
        mask.set_j(6, false); // J_{1,2} off
        mask.set_gamma(1, false);
        let layout = PhysLayout::new(&mask, 4);
        assert_eq!(layout.raw_len(), 14 + 3);

        let times = equally_spaced_times(5, 1.0);
        let truth = sample_random_parameters::<f64>(2, 14, &mask, TAU2);
        assert_eq!(truth.j()[6], 0.0, "masked coupling not sampled");
        let channels = ChannelSet::two_qubit_standard();
        let data = evolve(&plus_plus_state(2), &truth, &channels, &times).unwrap();

        let loss = PinnverseLoss::new(template, &mask, &data, 8, 1.0, 1.0, 1.0).unwrap();
        let mut config = NetConfig::<f64>::new(15, vec![6], 2);
        config.raw_phys_init = layout.initial_raw(TAU2);
        let state = init(&config);
        let mut ws = loss.make_workspace(&state);
        let mut scratch = loss.make_scratch();
        let mut grads = Gradients::zeros_like(&state);
        loss.backward(&state, &mut ws, &mut scratch, &mut grads, None).unwrap();
        assert_eq!(grads.raw_phys.len(), 17, "masked slots have no gradient entry");

        let recovered = layout.unpack_parameters(&state.raw_phys);
        assert_eq!(recovered.j()[6], 0.0);
        assert_eq!(recovered.gamma()[1], 0.0);
    }

    #[test]
    fn fit_frozen_dynamics_recovers_zero_couplings() {
        // Constant trajectory, gamma masked off: every recovered J is ~0.
        let n_c = 20;
        let times = equally_spaced_times(n_c, 1.0);
        let truth = ParameterSet::<f64>::zeros(2, 4);
        let channels = ChannelSet::two_qubit_standard();
        let data = evolve(&plus_plus_state(2), &truth, &channels, &times).unwrap();

        let mut config = FitConfig::<f64>::two_qubit();
        config.mask = config.mask.clone().with_gamma_disabled();
        config.max_steps = 3_000;
        config.n_t = 50;
        config.restarts = 1;
        config.seed = 3;
        config.hidden = vec![16, 16];
        let report = fit(&data, &channels, &config).unwrap();
        let omega0 = TAU2;
        for &j in &report.recovered.j {
            assert!(j.abs() < 1e-2 * omega0, "coupling {j} not near zero");
        }
        assert!(report.recovered.gamma.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fit_divergence_flagged_and_survivors_win() {
        let times = equally_spaced_times(10, 1.0);
        let truth = ParameterSet::<f64>::zeros(2, 4);
        let channels = ChannelSet::two_qubit_standard();
        let data = evolve(&plus_plus_state(2), &truth, &channels, &times).unwrap();

        let mut config = FitConfig::<f64>::two_qubit();
        config.max_steps = 200;
        config.n_t = 10;
        config.restarts = 1;
        config.hidden = vec![8];
        config.lr0 = 1e18; // guaranteed blow-up
        let result = fit(&data, &channels, &config);
        assert!(matches!(result, Err(Error::AllRestartsFailed(1))));
    }

    #[test]
    fn fit_deterministic_reports() {
        let times = equally_spaced_times(8, 1.0);
        let mask = TrainableMask::all_trainable(2, 4);
        let truth = sample_random_parameters::<f64>(2, 51, &mask, TAU2);
        let channels = ChannelSet::two_qubit_standard();
        let data = evolve(&plus_plus_state(2), &truth, &channels, &times).unwrap();

        let mut config = FitConfig::<f64>::two_qubit();
        config.max_steps = 300;
        config.n_t = 20;
        config.restarts = 2;
        config.hidden = vec![8, 8];
        config.seed = 9;
        let a = fit(&data, &channels, &config).unwrap();
        let b = fit(&data, &channels, &config).unwrap();
        assert_eq!(a.to_json_deterministic(), b.to_json_deterministic());
        assert!(a.recovered.gamma.iter().all(|&g| g >= 0.0));
    }

    #[test]
    fn reconstruct_matches_oracle_for_exact_parameters() {
        let mask = TrainableMask::all_trainable(2, 4);
        let truth = sample_random_parameters::<f64>(2, 61, &mask, TAU2);
        let channels = ChannelSet::two_qubit_standard();
        let times = equally_spaced_times(40, 1.0);
        let dense = evolve(&plus_plus_state(2), &truth, &channels, &times).unwrap();
        let recon = reconstruct(&truth, &channels, &times).unwrap();
        assert!(dense.max_abs_diff(&recon) < 1e-8);
    }
}
