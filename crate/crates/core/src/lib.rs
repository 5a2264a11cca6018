pub mod algebra;
pub mod arch;
pub mod bench;
pub mod cli;
pub mod error;
pub mod fmt;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
