//! Multi-modal masked autoencoder pretraining for RGB-D images and video.

pub mod error;
pub mod seed;
pub mod nn;
pub mod datagen;
pub mod tokenizer;
pub mod masking;
pub mod objectives;
pub mod net;
pub mod metrics;
pub mod optim;
pub mod checkpoint;
pub mod pipeline;

pub use error::{Error, Result};
