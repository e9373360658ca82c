pub mod autodiff;
pub mod checks;
pub mod dataset;
pub mod dst;
mod error;
pub mod eval;

pub use error::{Error, Result};
pub mod features;
pub mod imaging;
pub mod losses;
pub mod pipeline;
pub mod seg;
pub mod synth;
pub mod transfer;
