pub mod adapter;
pub mod bridge;
pub mod cge;
pub mod config;
pub mod cpg;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod store;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
