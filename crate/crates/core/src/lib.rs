//! Controllable synthesis of 3D lesion-like shapes and textures with
//! loss-guided diffusion over signed distance fields.
//!
//! The crate is organised by stage:
//!
//! * [`sdf`]: signed distance grids, normals, the Curvature Index and its
//!   exact gradient, re-distancing, procedural shapes and mesh export.
//! * [`diffusion`]: noise schedules, the DDPM sampler and two denoisers (an
//!   exact Gaussian-mixture score oracle and a small trainable network).
//! * [`latent`]: codecs between SDF grids and diffusion latents.
//! * [`guidance`]: anatomical guidance (target shape + target curvature)
//!   and the guided mask-synthesis trajectory.
//! * [`texture`]: signal-intensity guidance with masked repaint over a
//!   preserved background.
//! * [`metrics`]: MMD, coverage and pairwise Dice over mask sets.
//! * [`io`]: raw volume files with JSON sidecars.

pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod rng;
pub mod sdf;
pub mod texture;

pub use error::{Error, Result};
