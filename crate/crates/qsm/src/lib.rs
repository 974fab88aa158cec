//! Desk-scale quantitative susceptibility mapping (QSM).
//!
//! The crate recovers tissue magnetic susceptibility from multi-echo MR
//! phase data by nonlinear dipole inversion. The solver is a damped
//! generalized approximate message passing (GAMP) iteration over 3D wavelet
//! coefficients with a Laplace signal prior and a two-component
//! Gaussian-mixture noise model; the prior rate, mixture weights, and noise
//! variances are estimated during the reconstruction instead of hand-tuned.
//!
//! Alongside the solver there is a forward simulator (dipole kernel,
//! multi-echo phase model, phantoms, noise injection), simple baselines
//! (truncated k-space division, regularized least squares), volumetric
//! quality metrics (NRMSE, SSIM, HFEN), and a small file format for typed
//! 3D volumes.
//!
//! Start with the runnable programs in `examples/`; each one demonstrates a
//! single capability end to end. The `qsm` binary wires the same library
//! calls into a scriptable command line.

pub mod cli;
pub mod dipole;
pub mod error;
pub mod fourier;
pub mod gamp;
pub mod metrics;
pub mod phantom;
pub mod recon;
pub mod volume;
pub mod wavelet;

pub use error::{QsmError, Result};
pub use volume::{read_qvol, write_qvol, Axis, Dtype, FieldKind, Volume, VolumeData, VolumeHeader};
