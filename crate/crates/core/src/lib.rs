pub mod error;
pub mod autodiff;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod inference;
pub mod data;
pub mod harness;

pub use error::{Error, Result};
pub use linalg::{Matrix, RngStream};
