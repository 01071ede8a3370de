//! Feedback-gated rectified linear units: a self-contained neural-network
//! engine where top-down feedback connections modulate the gain of ReLU
//! activations, trained by backpropagation through time-unrolled networks.
//!
//! Modules:
//! - [`tensor`] — dense arrays and numeric kernels
//! - [`autograd`] — reverse-mode differentiation over a static tape
//! - [`activation`] — the gated activation, its saturating feedback function
//!   and exact derivatives
//! - [`network`] — architecture descriptions, feedback topology, unrolling
//! - [`train`] — losses, optimizers, training/evaluation loops
//! - [`data`] — MNIST/CIFAR-10 loaders, noise and contrast transforms,
//!   synthetic fixtures
//! - [`checkpoint`] — bit-exact model serialization
//! - [`experiment`] — config-driven experiment harness behind the `fg` CLI

/// Engine-wide scalar type: `f64` by default, `f32` with the `single` feature.
#[cfg(feature = "single")]
pub type Real = f32;
#[cfg(not(feature = "single"))]
pub type Real = f64;

/// Name of the active precision mode.
pub fn precision_name() -> &'static str {
    if cfg!(feature = "single") {
        "single"
    } else {
        "double"
    }
}

pub mod activation;
pub mod autograd;
pub mod error;
pub mod experiment;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod data;
pub mod network;

pub use tensor::{Padding, Tensor};
