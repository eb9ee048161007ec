pub mod error;
pub mod eval;
pub mod likelihood;
pub mod model;
pub mod numcore;
pub mod odesolve;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
