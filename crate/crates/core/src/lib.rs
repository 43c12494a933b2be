//! Coarse-to-fine Q-attention with top-k tree expansion.

pub mod agent;
pub mod env;
pub mod error;
pub mod expansion;
pub mod par;
pub mod qmodel;
pub mod voxelgrid;

pub use error::{QteError, Result};
