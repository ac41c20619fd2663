pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod gne;
pub mod lra;
pub mod model;
pub mod numeric;

pub use error::{Error, Result};
