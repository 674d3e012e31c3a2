//! Iterative instance segmentation at desk scale.
//!
//! A small hypercolumn convnet segments one detection box at a time and is fed its own
//! previous heatmap as an extra, category-specific input channel. Training proceeds in
//! stages over a growing pool of cached self-predictions; inference applies the network
//! repeatedly starting from a constant ½ map. The crate also contains the synthetic
//! "shape world" data generator, post-processing (binarization, superpixel projection,
//! NMS), region AP evaluation, and bit-exact model checkpoints.

pub mod error;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod geometry;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod postprocess;

pub use geometry::{BBox, BinaryMask};
pub use heatmap::Heatmap;
pub use model::{encode_input, init_params, predict_heatmap, ArchDescriptor, EncodedInput, SegNet};
