//! Number-adaptive prototype learning for point cloud semantic segmentation.
//!
//! This crate is `no_std` (with `alloc`). It holds the tensor engine with
//! reverse-mode differentiation, the optimizer, voxelization, the synthetic
//! scene generator, the feature extractor and prototype decoder, the
//! set-prediction loss with Hungarian matching, and inference and metrics.
//! File formats, configuration and the command-line trainer live in the
//! `napl` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cloud;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod loss;
pub mod matching;
pub mod model;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod voxel;

pub use cloud::{Augmentation, PointCloud, IGNORE_LABEL};
pub use decoder::{DecoderConfig, PrototypeSet};
pub use encoder::{EncoderConfig, PreparedScene};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use inference::{ConfusionMatrix, MiouReport, PrototypeStats, SegmentationResult};
pub use loss::LossConfig;
pub use matching::{hungarian_match, CostMatrix, Matching};
pub use model::{NaplConfig, NaplModel, PwcModel};
pub use optim::{adamw_step, AdamWConfig, OptimizerState, PolyLr};
pub use params::{ParamGroup, ParamStore};
pub use tensor::{Real, Tensor};
