//! Temporal action segmentation with sparse long-term context attention.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod seqdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
