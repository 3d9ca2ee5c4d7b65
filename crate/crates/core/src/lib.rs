//! Identification of the Hamiltonian couplings and Lindblad decay rates of
//! open 1- and 2-qubit systems from time series of observable expectation
//! values.
//!
//! A small fully connected network approximates the trajectory of the
//! Pauli-string expectation values while the physical parameters entering the
//! equations of motion are trained jointly against a composite loss: a
//! physics residual evaluated on collocation points plus a mismatch term on
//! the measured data. Minimizing the total loss identifies the system.
//!
//! Module map:
//! - [`pauli`]: exact complex linear algebra for Pauli-string operators.
//! - [`lindblad`]: density-matrix master-equation integrator, the ground-truth
//!   oracle, plus synthetic-data generation (noise injection, random
//!   parameter sampling).
//! - [`liouvillian`]: the affine generator `(A, b)` of the observable
//!   dynamics, `d<s>/dt = A<s> + b`, linear in the physical parameters.
//! - [`net`]: purpose-built MLP with a derivative-carrying forward pass and
//!   exact reverse-mode gradients for the fixed loss family used here.
//! - [`fit`]: the composite loss and the joint training loop.
//! - [`metrics`], [`io`], [`harness`]: error metrics, CSV/JSON interchange,
//!   and the experiment runners behind the CLI.
//!
//! All core math is generic over the scalar type via [`scalar::Real`]
//! (`f32` or `f64`); the `*64` aliases at the crate root are the types the
//! CLI and the test suites use.

pub mod eigen;
pub mod error;
pub mod fit;
pub mod harness;
pub mod io;
pub mod lindblad;
pub mod liouvillian;
pub mod metrics;
pub mod net;
pub mod pauli;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete `f64` aliases; everything numerical defaults to these.
pub type ComplexMatrix64 = pauli::ComplexMatrix<f64>;
pub type ObservableBasis64 = pauli::ObservableBasis<f64>;
pub type ParameterSet64 = lindblad::ParameterSet<f64>;
pub type ChannelSet64 = lindblad::ChannelSet<f64>;
pub type DensityMatrix64 = lindblad::DensityMatrix<f64>;
pub type Trajectory64 = lindblad::Trajectory<f64>;
pub type AffineGenerator64 = liouvillian::AffineGenerator<f64>;
pub type GeneratorTemplate64 = liouvillian::GeneratorTemplate<f64>;
pub type NetConfig64 = net::NetConfig<f64>;
pub type NetState64 = net::NetState<f64>;
pub type FitConfig64 = fit::FitConfig<f64>;
