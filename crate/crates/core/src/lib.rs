//! Hybrid span-corruption + replaced-token-detection pre-training for tiny
//! encoder-decoder transformers.
//!
//! The crate is organised the way a training run flows:
//!
//! - [`tokenizer`]: whitespace vocabulary, encoding and batch packing
//! - [`corruption`]: span corruption, token-level masking, decoder targets
//! - [`model`]: generator encoder, discriminator encoder-decoder, RTD head
//! - [`objectives`]: generator, RTD and span-corruption losses
//! - [`trainer`]: two-stage curriculum, Adafactor, checkpoints and metrics
//! - [`diagnostics`]: clean/noisy evaluation, loss-gap regression, FLOPs
//! - [`config`]: flat `key=value` run configuration

pub mod autodiff;
pub mod config;
pub mod corruption;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
