//! Stochastic dynamic mode decomposition (SDMD).
//!
//! Data-driven approximation of the Koopman semigroup `K^Δt` of an Itô SDE
//! through the first-order stochastic Taylor expansion
//! `K̂ = I + Δt (Ĝ + γI)⁻¹ Ĥ`, together with EDMD and gEDMD baselines,
//! trainable neural dictionaries and drift/diffusion estimation.
//!
//! Module map:
//! - [`models`]: benchmark SDEs with exact coefficients and analytic spectra
//! - [`simulate`]: Euler-Maruyama ensembles with splittable seeding
//! - [`dictionary`]: fixed observable families and generator actions
//! - [`koopman`]: Gram assembly, operators and spectra
//! - [`estimate`]: drift and diffusion estimation from snapshot pairs
//! - [`learn`]: trainable dictionaries (SDMD-DL, EDMD-DL, gEDMD-DL)
//! - [`io`]: CSV and JSON exchange formats

pub mod dictionary;
pub mod error;
pub mod estimate;
pub mod io;
pub mod koopman;
pub mod learn;
pub mod models;
pub mod rng;
pub mod simulate;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
pub use num_complex::Complex64;
