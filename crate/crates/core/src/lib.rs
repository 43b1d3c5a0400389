//! Coupling-layer normalizing flows on 2D synthetic targets, with a
//! latent-space sampler that mixes a Riemannian-manifold MALA kernel and an
//! independent Metropolis–Hastings kernel.
//!
//! The pipeline is `targets` → `train` → `samplers` → `metrics`, with `cli`
//! wiring it together for the `nfsails` binary.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod points;
pub mod rng;
pub mod samplers;
pub mod targets;
pub mod train;

#[cfg(test)]
mod testutil;

pub use points::PointSet;
