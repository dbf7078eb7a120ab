//! Object-centric masked autoencoder built on a small reverse-mode autograd
//! tape: a ViT encoder with one class token per slot, a dot-product object
//! function, a broadcasting decoder with alpha-mixture composition, the
//! annealed training loop, and unsupervised segmentation metrics.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod patch;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
