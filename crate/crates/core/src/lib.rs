pub mod data;
pub mod error;
pub mod gmre;
pub mod hra;
pub mod model;
pub mod temporal;
pub mod tensor;
pub mod trainer;

pub use error::{ErrorKind, GmrlError, Result};
