//! Continuous-time epidemic forecasting with an epidemiology-aware neural ODE
//! and a dynamically learned disease-transmission graph.
//!
//! The crate is `no_std` (with `alloc`). Everything here is pure computation:
//! a reverse-mode tape, natural cubic control paths, fixed-step ODE solvers,
//! the SIR-structured latent dynamics, graph construction, attention fusion,
//! metrics, the synthetic data generator and the training loop. File formats,
//! CSV ingestion and the command line live in the `earth` crate.

#![no_std]

extern crate alloc;

pub mod data;
pub mod eano;
pub mod error;
pub mod fusion;
pub mod gltg;
pub mod model;
pub mod ode;
pub mod rng;
pub mod spline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
