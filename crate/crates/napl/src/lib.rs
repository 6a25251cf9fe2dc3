//! File formats, datasets, training and evaluation for prototype-based
//! point-cloud segmentation on top of `napl-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod kitti;
pub mod train;

pub use config::{Ablation, AblationFlags, DatasetKind, RunConfig};
pub use dataset::{Dataset, Split, SyntheticManifest};
pub use error::{NaplError, Result};
pub use train::{evaluate, export_stats, train_napl, train_pwc, Metrics, RunOutput};
