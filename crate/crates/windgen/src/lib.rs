//! Conditional generative modeling of wind velocity profiles.
//!
//! Learns a probabilistic mapping from coarse macroweather conditions
//! (binned wind speed, compass direction) to fine-grained wind-velocity-vs-
//! altitude profiles. Three models share one data pipeline:
//!
//! - [`gmm`] — Gaussian mixture baseline fitted by EM in a PCA-reduced
//!   joint space, conditioned by rejection sampling.
//! - [`ddpm`] — denoising diffusion with a linear noise schedule.
//! - [`fm`] — flow matching with linear conditional paths and ODE sampling.
//!
//! The diffusion and flow models share the conditioned 1D U-Net in [`nn`].
//! [`eval`] reproduces the evaluation protocol: symmetrized KL by altitude,
//! conditional mean/std profiles, and a condition-holdout K-fold grid.

pub mod checkpoint;
pub mod data;
pub mod ddpm;
pub mod error;
pub mod eval;
pub mod fm;
pub mod gmm;
pub mod nn;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
