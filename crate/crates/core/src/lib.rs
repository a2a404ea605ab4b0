//! K-means views of self-supervised objectives and prior matching for
//! Siamese networks.
//!
//! Modules, bottom-up:
//! - [`distributions`]: priors, entropy, cross-entropy, KL.
//! - [`clustering`]: explicit/implicit K-means, Lloyd, exhaustive oracle.
//! - [`transport`]: Sinkhorn-Knopp projection and constrained K-means.
//! - [`mixture`]: isotropic GMM posterior/objective and the zero-temperature limit.
//! - [`losses`]: simplified VICReg, MSN, PMSN and analytic PMSN gradients.
//! - [`sampling`]: class-stratified and frequency-weighted mini-batch samplers.
//! - [`synthdata`]: synthetic mixtures and the two-factor toy dataset.
//! - [`trainer`]: toy Siamese trainer and evaluation metrics.
//! - [`verify`], [`experiment`]: property suites and the prior comparison run.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod distributions;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod mixture;
pub mod sampling;
pub mod synthdata;
pub mod trainer;
pub mod verify;
pub mod transport;

pub use error::{Error, Result};

/// N×d matrix, one row per point.
pub type DataMatrix = ndarray::Array2<f64>;
