pub mod error;
pub mod attention;
pub mod config;
pub mod data;
pub mod dist;
pub mod eval;
pub mod harness;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
