pub mod autodiff;
pub mod cli;
pub mod clustering;
pub mod container;
pub mod dataset;
pub mod doe;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod trainers;

pub use error::{Error, Result};
