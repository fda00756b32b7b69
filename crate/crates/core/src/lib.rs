//! No-reference quality assessment for generated video.
//!
//! A frame-level distribution head predicts per-bin probabilities over scores
//! `0..100`; the video score is the mean of the decoded frame scores. Training
//! combines an absolute-error term with a Gaussian-label cross-entropy and can
//! use weight-space adversarial steps. A graph-attention crop scorer selects
//! salient windows before feature extraction.

pub mod config;
pub mod crop;
pub mod data_io;
pub mod error;
pub mod fgm;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod quality_model;
pub mod regressor;

pub use error::{Result, VqaError};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/fgm.md")]
    mod fgm {}
    #[doc = include_str!("../../../book/src/cropping.md")]
    mod cropping {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
