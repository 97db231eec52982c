//! Bayesian calibration of linear differential equation models with
//! physics-informed Gaussian process priors.
//!
//! A GP prior on the solution channel `u` induces, through a linear operator
//! `L` with physical parameters, a joint multi-output GP over `(u, f = L u)`
//! whose cross- and f-covariances are derivatives of the base kernel. The
//! crate provides the kernel derivative machinery, exact and sparse
//! (FITC/VFE) inference with Hamiltonian Monte Carlo or MAP point estimates,
//! model-discrepancy and measurement-bias extensions, and simulators for the
//! Windkessel and heat-equation studies.

pub mod infer;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod physics;
pub mod real;
pub mod sim;
pub mod sparse;

pub mod presets;

pub use kernel::{DerivOrder, HyperParams, Inputs, KernelFamily, KernelSpec};
pub use model::{ModelVariant, NoiseParams, ObservationSet};
pub use physics::{heat_operator, wk2_operator, BlockKernel, LinearOperatorSpec, MeanFn, PhysParams};
