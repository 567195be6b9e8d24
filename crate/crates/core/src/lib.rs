pub mod balance;
pub mod hash;
pub mod error;
pub mod matrix;
pub mod qgemm;
pub mod quant;
pub mod sensitivity;
pub mod toydit;
pub mod trace_io;

pub use error::{DtqError, Result};
pub use matrix::Matrix;
