//! Motion style transfer across skeleton topologies.
//!
//! A canonical-skeleton style autoencoder learns a style code and a
//! topology-agnostic content feature; a diffusion model on a specific
//! skeleton then denoises motion while borrowing style through the frozen
//! canonical decoder.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kinematics;
pub mod motion_io;
pub mod nn;
pub mod skeleton;
pub mod style_embedding;
pub mod topology_shift;

pub use error::{Error, Result};
pub use skeleton::{BodyPart, MotionClip, Rotation6D, Skeleton};
