//! Concept erasure for latent diffusion models.
//!
//! The training signal combines two ingredients:
//!
//! * [`manifold`]: conditioning embeddings sampled from the convex hull of a
//!   bank of prompts describing the concept, and
//! * [`fusion`]: a multi-scale transformer view of a noised reference image
//!   latent, merged residually into the latent.
//!
//! [`objective`] turns those into a negative-guidance regression target from
//! a frozen copy of the denoiser, [`trainer`] runs the joint optimization and
//! [`eval`] measures how thoroughly a concept was removed.

pub mod backend;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod manifold;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
