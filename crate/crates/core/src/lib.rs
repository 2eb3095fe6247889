pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod channel;
pub mod radar;
pub mod rng;
pub mod scene;
pub mod dataset;
pub mod rvfn;
pub mod lstn;
pub mod tram;
pub mod model;
pub mod training;
pub mod eval;
pub mod config;
pub mod pipeline;
