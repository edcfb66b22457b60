//! Camera calibration refinement through a differentiable gaussian-splat
//! renderer.

pub mod camgrad;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod io;
pub mod optim;
pub mod renderer;
pub mod reparam;
pub mod scene;
pub mod schedule;

pub use error::{Error, Result};
