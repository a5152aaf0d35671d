//! Smooth identity embeddings for face swapping, at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! procedural synthetic face dataset with exact generative factors
//! ([`synth`]), a supervised-contrastive identity embedder ([`embedder`]),
//! a conditional U-Net swap generator ([`generator`]) trained against a
//! discriminator ([`adversary`]) by the three-loss loop in [`swap`], and the
//! embedding-smoothness and swap-quality metrics in [`metrics`].

pub mod adversary;
pub mod checkpoint;
pub mod embedder;
pub mod error;
pub mod evaluate;
pub mod generator;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod swap;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{no_grad, with_grad, Dual, Real, Scalar, Tensor};
