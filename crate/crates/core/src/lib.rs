pub mod calibration;
pub mod cli;
pub mod error;
pub mod expr;
pub mod io;
pub mod lti;
pub mod ml;
pub mod pipeline;
pub mod propagation;
pub mod sim;
pub mod uncertain;

pub use error::{Error, Result};
