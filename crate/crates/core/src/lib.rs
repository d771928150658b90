pub mod action;
pub mod checkpoint;
pub mod corpus;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod eval;
pub mod math;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod vrnn;

pub use error::{Error, Result};
