//! Core library for DefT, a hybrid CNN/transformer encoder-decoder for
//! pixel-wise surface defect segmentation, built on a small reverse-mode
//! autodiff tape. No GPU, no external ML runtime; every kernel is written
//! against plain slices and is deterministic for a fixed seed.

pub mod checkpoint;
pub mod data;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use element::{Dtype, Element};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport, GradCheckSettings};
pub use metrics::MetricsReport;
pub use graph::{Graph, NodeId};
pub use model::{DefTModel, ModelConfig, ModelOutputs, Toggles};
pub use tensor::Tensor;
