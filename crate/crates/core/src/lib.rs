pub mod authority;
pub mod dlog;
pub mod encoding;
pub mod error;
pub mod feip;
pub mod group;
pub mod nn;
pub mod protocols;
pub mod trainer;

pub use error::{Error, Result};
pub use group::{GroupElement, GroupParams, Scalar};
