//! Consistency distillation of a toy image-to-video diffusion model.
//!
//! The crate is organized bottom-up: [`diffusion`] holds schedules and
//! ODE solvers, [`toyworld`] the synthetic data, [`consistency`] the student
//! network and adapters, and the training, sampling and evaluation layers
//! build on those.

pub mod config;
pub mod consistency;
pub mod container;
pub mod diffusion;
pub mod discriminator;
pub mod distill;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod samplers;
pub mod seeds;
pub mod study;
pub mod toyworld;
pub mod unfold;
pub mod verify;

pub use error::{Error, Result};
