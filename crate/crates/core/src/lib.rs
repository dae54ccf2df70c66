pub mod bench;
pub mod catalog;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gan;
pub mod garment;
pub mod image;
pub mod nn;
pub mod oracle;
pub mod perceptual;
pub mod pipeline;
pub mod reformulator;
pub mod retrieval;
pub mod stylegan;

pub use error::{CoreError, Result};
