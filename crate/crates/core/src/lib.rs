//! Mixture-of-priors knowledge distillation for single-image
//! super-resolution: EDSR/RCAN backbones on a small reverse-mode autograd
//! engine, feature and block prior mixers, baseline distillation losses, a
//! paired-patch data pipeline, luma PSNR/SSIM evaluation and a training loop.

pub mod backbone;
pub mod blockmix;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod mixer;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
