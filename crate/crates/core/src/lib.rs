//! Breathing-motion prediction from image sequences.
//!
//! A multi-scale convolutional encoder feeds a ConvLSTM that is rolled
//! forward in time; a convolutional decoder turns each hidden state into
//! per-pixel motion classes, which a codebook maps back to displacement
//! fields. The crate also provides the synthetic phantom used as training
//! data, a PCA statistical baseline, training with a plateau learning-rate
//! schedule, and the evaluation metrics (vessel tracking error and NCC).

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod gradsuite;
pub mod io;
pub mod network;
pub mod par;
pub mod pca;
pub mod phantom;
pub mod pipeline;
pub mod quantizer;
pub mod report;
pub mod tensor;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
pub use field::{DisplacementField, Image};
pub use quantizer::{Codebook, MotionLabelMap};
pub use tensor::Tensor;
