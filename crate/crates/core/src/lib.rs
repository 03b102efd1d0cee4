//! Learned views for contrastive learning at desk scale.

pub mod batching;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod inversion;
pub mod losses;
pub mod modelzoo;
pub mod optim;
pub mod rng;
pub mod stamp;
pub mod trainer;
pub mod viewcache;
pub mod viewgen;

pub use error::{Error, Result};
