pub mod classify;
pub mod cli;
pub mod dimred;
pub mod error;
pub mod features;
pub mod imaging;
pub mod pipeline;
pub mod reliability;
pub mod synthgen;
pub mod textio;

pub use error::{Error, Result};
