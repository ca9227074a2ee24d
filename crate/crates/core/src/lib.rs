//! Action-conditioned world model for cyclic process signals.

pub mod autodiff;
pub mod error;
pub mod evalkit;
pub mod expharness;
pub mod plantsim;
pub mod trainloop;
pub mod worldmodel;

pub use error::{Error, Result};
