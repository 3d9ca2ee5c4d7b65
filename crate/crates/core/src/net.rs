//! Purpose-built neural network stack: a small fully connected network
//! mapping normalized time to the observable vector, with
//!
//! - a derivative-carrying forward pass (exact `d output / d t` propagated
//!   jointly with the value through every layer), and
//! - exact reverse-mode gradients of the fixed loss family assembled in
//!   [`crate::fit`], with respect to all weights, biases and the raw
//!   physical parameters.
//!
//! Decay rates are trained through the reparametrization `gamma = r^2`, so
//! nonnegativity holds by construction. The batched forward/backward
//! kernels below are the hot path of training; buffers live in a
//! [`Workspace`] and are reused across steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Smooth activation; the derivative path needs two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::UnsupportedActivation(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }

    #[inline]
    fn phi<T: Real>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
        }
    }

    /// Returns `(phi, phi')`.
    #[inline]
    fn phi_d1<T: Real>(self, z: T) -> (T, T) {
        match self {
            Activation::Tanh => {
                let p = z.tanh();
                (p, T::one() - p * p)
            }
        }
    }

    /// `phi''` from cached `(phi, phi')`.
    #[inline]
    fn phi_d2<T: Real>(self, p: T, p1: T) -> T {
        match self {
            Activation::Tanh => T::from_f64(-2.0) * p * p1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetConfig<T: Real> {
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    /// Initial values for the unconstrained physical parameters (trainable
    /// couplings first, then the raw decay parameters `r_k`); the trainer
    /// supplies its policy here.
    pub raw_phys_init: Vec<T>,
}

impl<T: Real> NetConfig<T> {
    pub fn new(output_dim: usize, hidden: Vec<usize>, seed: u64) -> Self {
        Self { output_dim, hidden, activation: Activation::Tanh, seed, raw_phys_init: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real> {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub w: Vec<T>,
    pub b: Vec<T>,
}

/// Weights and biases per layer plus the unconstrained physical parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState<T: Real> {
    pub layers: Vec<Layer<T>>,
    pub raw_phys: Vec<T>,
    pub activation: Activation,
}

/// Weights drawn uniform on `+-sqrt(6 / (fan_in + fan_out))`, biases zero,
/// deterministic per seed.
pub fn init<T: Real>(config: &NetConfig<T>) -> NetState<T> {
    assert!(config.hidden.iter().all(|&w| w > 0), "hidden widths must be positive");
    assert!(config.output_dim > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut widths = vec![1usize];
    widths.extend_from_slice(&config.hidden);
    widths.push(config.output_dim);

    let layers = widths
        .windows(2)
        .map(|pair| {
            let (n_in, n_out) = (pair[0], pair[1]);
            let scale = (6.0 / (n_in + n_out) as f64).sqrt();
            let w = (0..n_in * n_out)
                .map(|_| {
                    let u: f64 = rng.random();
                    T::from_f64(scale * (2.0 * u - 1.0))
                })
                .collect();
            Layer { n_in, n_out, w, b: vec![T::zero(); n_out] }
        })
        .collect();

    NetState { layers, raw_phys: config.raw_phys_init.clone(), activation: config.activation }
}

impl<T: Real> NetState<T> {
    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").n_out
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.n_out).collect()
    }

    /// Total number of trainable scalars (weights, biases, raw_phys).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>() + self.raw_phys.len()
    }

    /// Flat parameter vector: per layer weights then biases, raw_phys last.
    pub fn flatten_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out.extend_from_slice(&self.raw_phys);
        out
    }

    pub fn set_from_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count());
        let mut k = 0;
        for l in &mut self.layers {
            l.w.copy_from_slice(&flat[k..k + l.w.len()]);
            k += l.w.len();
            l.b.copy_from_slice(&flat[k..k + l.b.len()]);
            k += l.b.len();
        }
        self.raw_phys.copy_from_slice(&flat[k..]);
    }
}

/// Network output and its exact derivative with respect to the (normalized)
/// time input.
#[derive(Debug, Clone, PartialEq)]
pub struct DualOutput<T: Real> {
    pub value: Vec<T>,
    pub dt: Vec<T>,
}

/// Single-point dual forward pass; the batched kernel with a batch of one.
pub fn forward_with_dt<T: Real>(state: &NetState<T>, t: T) -> DualOutput<T> {
    let mut ws = Workspace::new(state, 1);
    forward_batch(state, &[t], &mut ws);
    DualOutput { value: ws.value.clone(), dt: ws.dt.clone() }
}

/// Per-evaluation buffers: activations and derivative-path intermediates for
/// every layer, point-major (`[point][unit]` flattened).
#[derive(Debug, Clone)]
pub struct Workspace<T: Real> {
    n_points: usize,
    /// Inputs to each layer (a[0] is the time column), plus derivative path.
    a: Vec<Vec<T>>,
    da: Vec<Vec<T>>,
    /// Pre-activations and derivative pre-activations per hidden layer.
    z: Vec<Vec<T>>,
    u: Vec<Vec<T>>,
    /// Output value and output time-derivative.
    pub value: Vec<T>,
    pub dt: Vec<T>,
    /// Backward scratch, ping-pong pairs sized to the widest layer.
    g_a: Vec<T>,
    g_da: Vec<T>,
    g_a_next: Vec<T>,
    g_da_next: Vec<T>,
}

impl<T: Real> Workspace<T> {
    pub fn new(state: &NetState<T>, n_points: usize) -> Self {
        let n_hidden = state.layers.len() - 1;
        let mut a = Vec::with_capacity(n_hidden + 1);
        let mut da = Vec::with_capacity(n_hidden + 1);
        let mut z = Vec::with_capacity(n_hidden);
        let mut u = Vec::with_capacity(n_hidden);
        a.push(vec![T::zero(); n_points]);
        da.push(vec![T::zero(); n_points]);
        let mut max_width = 1;
        for l in &state.layers[..n_hidden] {
            a.push(vec![T::zero(); n_points * l.n_out]);
            da.push(vec![T::zero(); n_points * l.n_out]);
            z.push(vec![T::zero(); n_points * l.n_out]);
            u.push(vec![T::zero(); n_points * l.n_out]);
            max_width = max_width.max(l.n_out);
        }
        let out_dim = state.output_dim();
        max_width = max_width.max(out_dim);
        Self {
            n_points,
            a,
            da,
            z,
            u,
            value: vec![T::zero(); n_points * out_dim],
            dt: vec![T::zero(); n_points * out_dim],
            g_a: vec![T::zero(); n_points * max_width],
            g_da: vec![T::zero(); n_points * max_width],
            g_a_next: vec![T::zero(); n_points * max_width],
            g_da_next: vec![T::zero(); n_points * max_width],
        }
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }
}

/// Batched dual forward pass over normalized times; fills the workspace.
pub fn forward_batch<T: Real>(state: &NetState<T>, taus: &[T], ws: &mut Workspace<T>) {
    assert_eq!(taus.len(), ws.n_points);
    let np = ws.n_points;
    ws.a[0].copy_from_slice(taus);
    ws.da[0].iter_mut().for_each(|v| *v = T::one());

    let n_hidden = state.layers.len() - 1;
    for l in 0..n_hidden {
        let layer = &state.layers[l];
        let (n_in, n_out) = (layer.n_in, layer.n_out);
        // z = a W^T + b, u = da W^T
        for p in 0..np {
            let a_in = &ws.a[l][p * n_in..(p + 1) * n_in];
            let da_in = &ws.da[l][p * n_in..(p + 1) * n_in];
            for j in 0..n_out {
                let row = &layer.w[j * n_in..(j + 1) * n_in];
                let mut zz = layer.b[j];
                let mut uu = T::zero();
                for k in 0..n_in {
                    zz += row[k] * a_in[k];
                    uu += row[k] * da_in[k];
                }
                ws.z[l][p * n_out + j] = zz;
                ws.u[l][p * n_out + j] = uu;
            }
        }
        for idx in 0..np * n_out {
            let (p, p1) = state.activation.phi_d1(ws.z[l][idx]);
            ws.a[l + 1][idx] = p;
            ws.da[l + 1][idx] = p1 * ws.u[l][idx];
        }
    }

    let out = &state.layers[n_hidden];
    let (n_in, n_out) = (out.n_in, out.n_out);
    for p in 0..np {
        let a_in = &ws.a[n_hidden][p * n_in..(p + 1) * n_in];
        let da_in = &ws.da[n_hidden][p * n_in..(p + 1) * n_in];
        for j in 0..n_out {
            let row = &out.w[j * n_in..(j + 1) * n_in];
            let mut v = out.b[j];
            let mut dv = T::zero();
            for k in 0..n_in {
                v += row[k] * a_in[k];
                dv += row[k] * da_in[k];
            }
            ws.value[p * n_out + j] = v;
            ws.dt[p * n_out + j] = dv;
        }
    }
}

/// Gradient accumulator mirroring [`NetState`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real> {
    pub w: Vec<Vec<T>>,
    pub b: Vec<Vec<T>>,
    pub raw_phys: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(state: &NetState<T>) -> Self {
        Self {
            w: state.layers.iter().map(|l| vec![T::zero(); l.w.len()]).collect(),
            b: state.layers.iter().map(|l| vec![T::zero(); l.b.len()]).collect(),
            raw_phys: vec![T::zero(); state.raw_phys.len()],
        }
    }

    pub fn clear(&mut self) {
        self.w.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = T::zero()));
        self.b.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = T::zero()));
        self.raw_phys.iter_mut().for_each(|x| *x = T::zero());
    }

    /// Flat view in the same order as [`NetState::flatten_params`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.raw_phys);
        out
    }
}

/// Reverse pass through the dual pipeline. `g_value` and `g_dt` hold the
/// loss gradients with respect to the network output and its time
/// derivative (same layout as `ws.value` / `ws.dt`); weight gradients are
/// accumulated into `grads` (caller clears beforehand).
pub fn backward_batch<T: Real>(
    state: &NetState<T>,
    ws: &mut Workspace<T>,
    g_value: &[T],
    g_dt: &[T],
    grads: &mut Gradients<T>,
) {
    let np = ws.n_points;
    let n_hidden = state.layers.len() - 1;
    let out = &state.layers[n_hidden];
    let (n_in, n_out) = (out.n_in, out.n_out);
    assert_eq!(g_value.len(), np * n_out);
    assert_eq!(g_dt.len(), np * n_out);

    // Output layer: v = W a + b, dv = W da.
    {
        let dw = &mut grads.w[n_hidden];
        let db = &mut grads.b[n_hidden];
        ws.g_a[..np * n_in].iter_mut().for_each(|x| *x = T::zero());
        ws.g_da[..np * n_in].iter_mut().for_each(|x| *x = T::zero());
        for p in 0..np {
            let a_in = &ws.a[n_hidden][p * n_in..(p + 1) * n_in];
            let da_in = &ws.da[n_hidden][p * n_in..(p + 1) * n_in];
            let ga = &mut ws.g_a[p * n_in..(p + 1) * n_in];
            let gda = &mut ws.g_da[p * n_in..(p + 1) * n_in];
            for j in 0..n_out {
                let gv = g_value[p * n_out + j];
                let gd = g_dt[p * n_out + j];
                let row = &out.w[j * n_in..(j + 1) * n_in];
                let dw_row = &mut dw[j * n_in..(j + 1) * n_in];
                db[j] += gv;
                for k in 0..n_in {
                    dw_row[k] += gv * a_in[k] + gd * da_in[k];
                    ga[k] += row[k] * gv;
                    gda[k] += row[k] * gd;
                }
            }
        }
    }

    // Hidden layers, top down. g_a/g_da hold gradients w.r.t. this layer's
    // activations; propagate into g_a_next/g_da_next for the layer below.
    for l in (0..n_hidden).rev() {
        let layer = &state.layers[l];
        let (n_in, n_out) = (layer.n_in, layer.n_out);
        ws.g_a_next[..np * n_in].iter_mut().for_each(|x| *x = T::zero());
        ws.g_da_next[..np * n_in].iter_mut().for_each(|x| *x = T::zero());
        let dw = &mut grads.w[l];
        let db = &mut grads.b[l];
        for p in 0..np {
            let a_in = &ws.a[l][p * n_in..(p + 1) * n_in];
            let da_in = &ws.da[l][p * n_in..(p + 1) * n_in];
            for j in 0..n_out {
                let idx = p * n_out + j;
                let (phi, phi1) = state.activation.phi_d1(ws.z[l][idx]);
                let phi2 = state.activation.phi_d2(phi, phi1);
                let ga = ws.g_a[idx];
                let gda = ws.g_da[idx];
                let g_z = phi1 * ga + phi2 * ws.u[l][idx] * gda;
                let g_u = phi1 * gda;
                db[j] += g_z;
                let row = &layer.w[j * n_in..(j + 1) * n_in];
                let dw_row = &mut dw[j * n_in..(j + 1) * n_in];
                let ga_next = &mut ws.g_a_next[p * n_in..(p + 1) * n_in];
                let gda_next = &mut ws.g_da_next[p * n_in..(p + 1) * n_in];
                for k in 0..n_in {
                    dw_row[k] += g_z * a_in[k] + g_u * da_in[k];
                    ga_next[k] += row[k] * g_z;
                    gda_next[k] += row[k] * g_u;
                }
            }
        }
        std::mem::swap(&mut ws.g_a, &mut ws.g_a_next);
        std::mem::swap(&mut ws.g_da, &mut ws.g_da_next);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamParams<T> {
    pub fn with_lr(lr: T) -> Self {
        Self {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }
}

/// First/second-moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub step: u64,
    m: Gradients<T>,
    v: Gradients<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(state: &NetState<T>) -> Self {
        Self { step: 0, m: Gradients::zeros_like(state), v: Gradients::zeros_like(state) }
    }
}

/// One Adam update with bias correction; mutates `state` and `opt`.
pub fn adam_step<T: Real>(
    state: &mut NetState<T>,
    grads: &Gradients<T>,
    opt: &mut AdamState<T>,
    hp: &AdamParams<T>,
) -> Result<()> {
    if grads.w.len() != state.layers.len() || grads.raw_phys.len() != state.raw_phys.len() {
        return Err(Error::ShapeMismatch("gradient shape differs from state".to_string()));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = T::one() - hp.beta1.powi(t);
    let bc2 = T::one() - hp.beta2.powi(t);
    let one = T::one();

    let mut update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
        for i in 0..p.len() {
            m[i] = hp.beta1 * m[i] + (one - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (one - hp.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    };

    for (l, layer) in state.layers.iter_mut().enumerate() {
        if grads.w[l].len() != layer.w.len() || grads.b[l].len() != layer.b.len() {
            return Err(Error::ShapeMismatch(format!("layer {l} gradient shape")));
        }
        update(&mut layer.w, &grads.w[l], &mut opt.m.w[l], &mut opt.v.w[l]);
        update(&mut layer.b, &grads.b[l], &mut opt.m.b[l], &mut opt.v.b[l]);
    }
    update(&mut state.raw_phys, &grads.raw_phys, &mut opt.m.raw_phys, &mut opt.v.raw_phys);
    Ok(())
}

/// Serializable checkpoint, always stored as `f64`.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointLayer {
    n_in: usize,
    n_out: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    activation: String,
    layers: Vec<CheckpointLayer>,
    raw_phys: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "netstate-v1";

pub fn to_checkpoint_json<T: Real>(state: &NetState<T>) -> String {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        activation: state.activation.name().to_string(),
        layers: state
            .layers
            .iter()
            .map(|l| CheckpointLayer {
                n_in: l.n_in,
                n_out: l.n_out,
                w: l.w.iter().map(|x| x.to_f64()).collect(),
                b: l.b.iter().map(|x| x.to_f64()).collect(),
            })
            .collect(),
        raw_phys: state.raw_phys.iter().map(|x| x.to_f64()).collect(),
    };
    serde_json::to_string(&ck).expect("checkpoint serialization cannot fail")
}

pub fn from_checkpoint_json<T: Real>(json: &str) -> Result<NetState<T>> {
    let ck: Checkpoint = serde_json::from_str(json)?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::CheckpointFormat(format!(
            "unknown format tag '{}', expected '{CHECKPOINT_FORMAT}'",
            ck.format
        )));
    }
    let activation = Activation::from_name(&ck.activation)?;
    let mut layers = Vec::with_capacity(ck.layers.len());
    for (i, l) in ck.layers.iter().enumerate() {
        if l.w.len() != l.n_in * l.n_out || l.b.len() != l.n_out {
            return Err(Error::CheckpointFormat(format!("layer {i} shape inconsistent")));
        }
        layers.push(Layer {
            n_in: l.n_in,
            n_out: l.n_out,
            w: l.w.iter().map(|&x| T::from_f64(x)).collect(),
            b: l.b.iter().map(|&x| T::from_f64(x)).collect(),
        });
    }
    if layers.is_empty() {
        return Err(Error::CheckpointFormat("no layers".to_string()));
    }
    Ok(NetState {
        layers,
        raw_phys: ck.raw_phys.iter().map(|&x| T::from_f64(x)).collect(),
        activation,
    })
}
