//! Multi-subject, layout-aware text-to-image diffusion at toy scale.

mod error;

pub mod attention;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod constraints;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
