pub mod analysis;
pub mod data;
pub mod error;
pub mod network;
pub mod rank;
pub mod svd_grad;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
