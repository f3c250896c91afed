pub mod apps;
pub mod cli;
pub mod config;
pub mod container;
pub mod effects;
pub mod engine;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod rank1;
pub mod sparse;
pub mod spec;
pub mod weights;

pub use error::{Error, Result};
pub use spec::ModelSpec;
