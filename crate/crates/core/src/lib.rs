pub mod carfield;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod model;
pub mod sampler;
pub mod simstudy;
pub mod mouthgraph;
pub mod stochastic;

pub use error::{Error, Result};
