//! Dual-domain multi-contrast MRI reconstruction.
//!
//! A fully-sampled reference contrast is translated into the target contrast,
//! rigidly registered onto the under-sampled target, and then fused with it
//! for reconstruction. Every stage runs as a pair of networks, one on images
//! and one on k-space, trained under cross-domain consistency losses and
//! optimised stage by stage with earlier stages frozen.
//!
//! Module map:
//!
//! - [`diffcore`]: reverse-mode autodiff over dense tensors, layers, Adam
//! - [`fourier`]: centered orthonormal 2D DFT pair
//! - [`acquisition`]: Cartesian line masks, undersampling, data consistency
//! - [`geometry`]: differentiable rigid warps
//! - [`datagen`]: synthetic two-contrast phantoms and the record format
//! - [`models`]: synthesis, registration and reconstruction networks
//! - [`objectives`]: the per-stage loss terms and totals
//! - [`pipeline`]: staged training, checkpoints, evaluation, ablations
//! - [`evalkit`]: brain-masked PSNR/SSIM and PGM report rendering

pub mod acquisition;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod fourier;
pub mod geometry;
pub mod models;
pub mod objectives;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
