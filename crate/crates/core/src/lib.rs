pub mod bounds;
pub mod control;
pub mod env;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod moments;
pub mod tube;
pub mod validation;

pub use error::{Error, Result};
