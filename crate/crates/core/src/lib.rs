//! Desk-scale laboratory for conditional diffusion transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: the Ornstein–Uhlenbeck forward process, its Gaussian
//!   perturbation kernel and an Euler–Maruyama backward sampler.
//! - [`targets`]: synthetic conditional data families with exact samplers,
//!   time-`t` densities and oracle scores.
//! - [`localpoly`]: diffused local polynomial score approximators built from
//!   piecewise Taylor tables of the initial density.
//! - [`transformer`]: a toy in-context conditional DiT with hand-written
//!   reverse-mode gradients.
//! - [`uat`]: the explicit quantizer / contextual-attention / memorizer
//!   universal approximator.
//! - [`training`]: classifier-free-guidance score matching and Monte-Carlo
//!   score risk.
//! - [`evaluation`]: covering-number calculator, guided scores, TV distance,
//!   subspace recovery and trend sweeps.

pub mod error;
pub mod evaluation;
pub mod localpoly;
pub mod quadrature;
pub mod rng;
pub mod schedule;
pub mod targets;
pub mod training;
pub mod transformer;
pub mod uat;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
