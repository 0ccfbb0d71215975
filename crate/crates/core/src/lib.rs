//! Adversarial face-protection perturbations at desk scale.
//!
//! The crate optimises an ℓ∞-bounded perturbation against four seeded toy
//! networks (a face projector, a cross-attention block, a P-Net style
//! detector and an identity embedder) using sign-gradient PGD with two
//! post-step refinements: Sobel-masked Gaussian smoothing and an 8×8 DCT
//! low-pass projection. Purification simulators (JPEG, bit-depth reduction,
//! resize round trips) and image metrics measure how much of the
//! perturbation survives.
//!
//! Start with the runnable programs under `examples/`; each one exercises a
//! single capability end to end.

pub mod cli;
pub mod config;
pub mod dct;
pub mod gradcheck;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod noise;
pub mod purify;
pub mod synth;
pub mod tensor;

mod error;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorError, Var};
