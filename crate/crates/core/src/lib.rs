//! Denoising conditional GAN for semantic-layout to image synthesis.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`] / [`ops`] — dense f32 tensors and reverse-mode
//!   automatic differentiation over a per-step Wengert tape.
//! * [`nn`] — convolution, transposed convolution, batch normalization,
//!   activations and the residual block.
//! * [`models`] — the residual encoder/decoder generator, the conditional
//!   patch discriminator and the frozen cascade feature extractor.
//! * [`losses`] — adversarial, L1, perturbed and cascade losses plus the
//!   weighted total objective.
//! * [`data`] — label maps, one-hot / instance-map encoding, Gaussian noise
//!   injection, jitter-crop augmentation, PPM/PGM I/O and the synthetic
//!   overlapping-objects dataset.
//! * [`trainer`] — Adam, the alternating G/D training loop, checkpointing
//!   and the ablation harness.
//! * [`metrics`] — MSE / RMSE / PSNR / SSIM over image pairs and corpora.
//! * [`gradcheck`] — central finite-difference verification for every
//!   differentiable operation in the crate.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
