//! Test-time adaptation of a two-modality attention-fusion classifier by
//! attention bootstrapping and principal entropy minimisation.
//!
//! - [`tensor`]: `f64` matrices and differentiable ops
//! - [`model`]: encoder stubs and the fusion pipeline, forward and reverse
//! - [`bootstrap`]: Gaussian attention-block statistics, KL loss, attention gap
//! - [`pem`]: entropy, ranks, reliable sets, principal entropy
//! - [`objective`]: batch losses and `backward`
//! - [`gradcheck`]: finite-difference oracle
//! - [`adapt`]: Adam and the online adaptation loop
//! - [`synth`]: synthetic benchmark, corruptions, pretraining
//! - [`io`]: checkpoint and dataset containers

pub mod adapt;
pub mod bootstrap;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod objective;
pub mod pem;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
