pub mod analysis;
pub mod codec;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod protocol;
pub mod toy;
pub mod wire;

pub use error::{DecodeError, Error, Result};
