//! Weakly supervised slide classification at desk scale.
//!
//! The pipeline runs end to end on a synthetic slide corpus: tissue
//! segmentation and patch tiling, contrastive pretraining of a small patch
//! encoder, per-slide feature bags, an attention-pooling bag classifier,
//! k-fold evaluation, and per-class attention heatmaps.
//!
//! The numeric substrate ([`tensor`], [`graph`], [`optim`], [`gradcheck`])
//! is generic over the scalar type via [`scalar::Scalar`]; everything that
//! trains runs in `f64`, and `f32` appears only in the on-disk feature
//! format. Concrete aliases for the common instantiations live at the crate
//! root.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod heatmap;
pub mod mil;
pub mod moco;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};

/// Training-precision tensor (all optimizer and model state).
pub type Tensor64 = tensor::Tensor<f64>;
/// Storage-precision tensor (the on-disk feature payload).
pub type Tensor32 = tensor::Tensor<f32>;
/// Training-precision parameter set.
pub type ParamSet64 = params::ParamSet<f64>;
/// Training-precision autodiff graph.
pub type Graph64 = graph::Graph<f64>;
