//! Conditional implicit neural atlas of developing-brain volumes.

pub mod adaptation;
pub mod analysis;
pub mod atlas;
pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod inr;
pub mod nifti;
pub mod phantom;
pub mod recipes;
pub mod rng;
pub mod so3;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
