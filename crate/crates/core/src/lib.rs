pub mod backbone;
pub mod decoders;
pub mod envs;
pub mod error;
pub mod inference;
pub mod numerics;
pub mod obs;
pub mod train;

pub use error::{Error, Result};
