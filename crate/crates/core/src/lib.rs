//! Transfer a pretrained image backbone to a small downstream task through
//! image re-representation fine-tuning, then compress it into a student by
//! feature distillation on generated pseudo-images.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common instantiations.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod digg;
pub mod distill;
pub mod error;
pub mod irf;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod transformer;
pub mod vq;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{RunConfig, StageConfig};
pub use data::{load_dataset, sample_few_data, DatasetManifest, ImageRecord, Provenance};
pub use error::{Error, Result};
pub use rng::SeededRng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use vq::TokenGrid;

/// Default working precision.
pub type Real = f32;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Dataset = data::DatasetManifest<Real>;
pub type Dataset64 = data::DatasetManifest<f64>;
pub type Record = data::ImageRecord<Real>;
pub type VqModel = vq::VqModel<Real>;
pub type VqModel64 = vq::VqModel<f64>;
pub type Codebook = vq::Codebook<Real>;
pub type LatentTransformer = transformer::LatentTransformer<Real>;
pub type LatentTransformer64 = transformer::LatentTransformer<f64>;
pub type Backbone = model::Backbone<Real>;
pub type TaskModel = model::TaskModel<Real>;
pub type TaskModel64 = model::TaskModel<f64>;
