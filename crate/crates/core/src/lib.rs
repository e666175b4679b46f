pub mod audio;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod diffgraph;
pub mod digest;
mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{Error, Result};
