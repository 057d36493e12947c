pub mod adapters;
pub mod autodiff;
pub mod ckpt;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod groups;
pub mod losses;
pub mod model;
pub mod prompt;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
