//! Learned lossy image codec built on a compressive autoencoder.
//!
//! The crate contains everything needed to train and run the codec at desk
//! scale: a small reverse-mode autodiff engine ([`tape`]), network layers
//! ([`nn`]), a Gaussian scale mixture rate model ([`entropy`]), the
//! encoder/decoder network ([`cae`]), the optimizer and training schedules
//! ([`trainer`]), the range-coded bitstream ([`coder`]) and quality
//! metrics ([`metrics`]).

pub mod cae;
pub mod coder;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model_io;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{ForwardMode, Tape, Var};
pub use tensor::Tensor;
