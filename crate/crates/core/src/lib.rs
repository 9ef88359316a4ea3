//! Segmentation-assisted diagnosis via transformer cross-attention.
//!
//! The crate builds a diagnosis classifier whose intermediate features are
//! enhanced ("vitalized") by multi-scale features from a segmentation
//! network, fused through encoder-decoder cross-attention blocks. It ships
//! the full model, the standard comparison baselines, training and
//! evaluation, a synthetic dataset generator for end-to-end verification,
//! and Grad-CAM explanations.

pub mod attention;
pub mod autograd;
pub mod backbones;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod sea;
pub mod synth;
pub mod train;

pub use autograd::{Arr, Param, ParamSet, Var};
pub use error::{Error, Result};
