//! Causal effect estimation for point-source interventions under
//! physical-process interference.
//!
//! The pipeline has four stages:
//!
//! 1. [`transport`] fits a mechanistic advection-diffusion model of pollutant
//!    transport to a gridded concentration field ([`mcmc`] supplies the
//!    posterior sampler).
//! 2. [`exposure`] turns the fitted dynamics into a bipartite source-receptor
//!    network and per-region treatment levels: a direct treatment `z` (scrubber
//!    status of the nearest facility) and an upwind exposure `g` (weighted
//!    share of treated upwind facilities), one set per posterior draw.
//! 3. [`outcome`] fits count-outcome response surfaces (parametric Poisson
//!    regression and log-linear BART) given `(x, z, g)`.
//! 4. [`effects`] computes direct/indirect causal contrasts by g-computation
//!    and pools them across exposure imputations with Rubin's rules, keeping
//!    the transport posterior "cut" from the outcome data.
//!
//! [`simulate`] generates synthetic data for every stage through the same code
//! paths, and drives the replication study comparing plug-in inference against
//! cut (uncertainty-propagating) inference.

pub mod effects;
pub mod error;
pub mod exposure;
pub mod grid;
pub mod kv;
pub mod linalg;
pub mod mcmc;
pub mod outcome;
pub mod rng;
pub mod simulate;
pub mod transport;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
