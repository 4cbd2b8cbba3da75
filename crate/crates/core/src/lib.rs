//! Unsupervised single-image layer separation.
//!
//! An input image `x` is modelled as a pixel-wise blend `x = y ⊕ z` of two
//! (or more) layers. Each layer gets its own encoder/decoder stream and its
//! own discriminator; training sees only unpaired samples of each domain and
//! is driven by latent-space self-supervision, cycle consistency and
//! adversarial losses.

pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod image;
pub mod kernels;
pub mod latent;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod preset;
pub mod seed;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use graph::{Graph, Var};
pub use tensor::{Shape, Tensor};
