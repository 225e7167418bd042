//! Weakly-supervised video anomaly detection with a convolutional
//! transformer multiple-instance-learning network.
//!
//! Videos are sequences of precomputed snippet features with one binary
//! label per video. The network scores every snippet, is trained with a
//! top-k ranking loss, a video-level classifier, smoothness/sparsity
//! regularisation and a contrastive loss over mined hard and easy snippets,
//! and is evaluated with frame-level ROC-AUC and average precision.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod optim;
pub mod synthdata;
pub mod tensor_core;
pub mod trainer;

pub use error::{Error, Result};
