//! Zero-shot image classification with a four-direction selective state
//! space encoder and an attribute-attention semantic head, built on a small
//! reverse-mode tensor engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod head;
pub mod model;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
