//! Run configuration: one JSON document with every tunable of a run.
//!
//! Unknown keys are rejected at every level. Missing keys take the value of
//! the desk-scale synthetic profile ([`RunConfig::synthetic`]); the
//! SemanticKITTI-scale values are available as [`RunConfig::kitti`].

use std::fs;
use std::path::{Path, PathBuf};

use napl_core::loss::LossConfig;
use napl_core::{AdamWConfig, Augmentation, EncoderConfig, NaplConfig};
use serde::{Deserialize, Serialize};

use crate::error::{NaplError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Kitti,
}

/// Ablation presets. `A` is the point-wise classification baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Ablation {
    #[value(name = "A")]
    A,
    #[value(name = "B")]
    B,
    #[value(name = "C")]
    C,
    #[serde(rename = "full")]
    #[value(name = "full")]
    Full,
}

impl Ablation {
    pub fn flags(self) -> AblationFlags {
        let (t, pbw, pd) = match self {
            Ablation::A => (false, false, false),
            Ablation::B => (true, false, false),
            Ablation::C => (true, true, false),
            Ablation::Full => (true, true, true),
        };
        AblationFlags {
            use_transformer: t,
            use_pretrained_backbone: pbw,
            use_prototype_dropout: pd,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::A => "A",
            Ablation::B => "B",
            Ablation::C => "C",
            Ablation::Full => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_transformer: bool,
    pub use_pretrained_backbone: bool,
    pub use_prototype_dropout: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Voxel edge length in meters.
    pub voxel_size: f32,
    /// Channel width of each downsampling stage.
    pub widths: Vec<usize>,
    /// Point feature and prototype dimension `D`.
    pub feature_dim: usize,
    pub num_queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub query_dim: usize,
    /// Voxel centers are centered and divided by this (meters) before the
    /// positional embedding.
    pub position_scale: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        RunConfig::synthetic().model
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub random_yaw: bool,
    pub scale_min: f32,
    pub scale_max: f32,
}

impl Default for AugmentSection {
    fn default() -> Self {
        RunConfig::synthetic().train.augment
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    /// Number of prototype pairs `M` dropped per sample and step.
    pub dropout_count: usize,
    /// Learning rate of every parameter during point-wise training.
    pub pwc_lr: f32,
    /// Learning rate of the pretrained backbone during prototype training.
    pub backbone_lr: f32,
    /// Learning rate of the point decoder and transformer.
    pub head_lr: f32,
    pub lr_power: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub focal_weight: f32,
    pub dice_weight: f32,
    pub focal_alpha: f32,
    pub focal_gamma: f32,
    pub no_object_weight: f32,
    pub augment: AugmentSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        RunConfig::synthetic().train
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Seed of the scene list; independent of the training seed.
    pub dataset_seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        RunConfig::synthetic().synthetic
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// Synthetic: directory holding `manifest.json` (optional). KITTI: the
    /// dataset root containing `sequences/`.
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ablation: AblationFlags,
    pub synthetic: SyntheticSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::synthetic()
    }
}

impl RunConfig {
    /// Desk-scale profile for the synthetic street scenes.
    pub fn synthetic() -> Self {
        RunConfig {
            dataset: DatasetKind::Synthetic,
            data_root: None,
            out_dir: PathBuf::from("runs"),
            seed: 0,
            model: ModelSection {
                voxel_size: 0.1,
                widths: vec![8, 16, 32, 64],
                feature_dim: 32,
                num_queries: 50,
                layers: 3,
                heads: 4,
                query_dim: 64,
                position_scale: 4.0,
            },
            train: TrainSection {
                batch_size: 4,
                epochs: 30,
                dropout_count: 10,
                pwc_lr: 1e-3,
                backbone_lr: 1e-4,
                head_lr: 1e-3,
                lr_power: 0.9,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.01,
                focal_weight: 1.0,
                dice_weight: 1.0,
                focal_alpha: 0.25,
                focal_gamma: 2.0,
                no_object_weight: 0.1,
                augment: AugmentSection {
                    random_yaw: true,
                    scale_min: 1.0,
                    scale_max: 1.0,
                },
            },
            ablation: Ablation::Full.flags(),
            synthetic: SyntheticSection {
                train_scenes: 200,
                val_scenes: 50,
                dataset_seed: 2024,
            },
        }
    }

    /// SemanticKITTI-scale profile.
    pub fn kitti() -> Self {
        let mut cfg = RunConfig::synthetic();
        cfg.dataset = DatasetKind::Kitti;
        cfg.model.voxel_size = 0.05;
        cfg.model.widths = vec![16, 32, 64, 128];
        cfg.model.position_scale = 25.0;
        cfg.train.batch_size = 16;
        cfg.train.epochs = 20;
        cfg.train.no_object_weight = 1.0;
        cfg.train.augment = AugmentSection {
            random_yaw: true,
            scale_min: 0.95,
            scale_max: 1.05,
        };
        cfg
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NaplError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| NaplError::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let err = |m: String| Err(NaplError::Config(m));
        if t.dropout_count >= self.model.num_queries {
            return err(format!(
                "dropout_count {} must be below num_queries {}",
                t.dropout_count, self.model.num_queries
            ));
        }
        for (name, lr) in [("pwc_lr", t.pwc_lr), ("backbone_lr", t.backbone_lr), ("head_lr", t.head_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return err(format!("{name} must be positive, got {lr}"));
            }
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return err("batch_size and epochs must be positive".into());
        }
        if !(t.augment.scale_min > 0.0 && t.augment.scale_min <= t.augment.scale_max) {
            return err("augment scale range must be positive and ordered".into());
        }
        let flags = self.ablation;
        if !flags.use_transformer && (flags.use_pretrained_backbone || flags.use_prototype_dropout) {
            return err("pretrained backbone and prototype dropout require use_transformer".into());
        }
        self.encoder().validate()?;
        self.napl(1).decoder().validate()?;
        self.loss().validate()?;
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            voxel_size: self.model.voxel_size,
            widths: self.model.widths.clone(),
            feature_dim: self.model.feature_dim,
        }
    }

    pub fn napl(&self, num_classes: usize) -> NaplConfig {
        NaplConfig {
            encoder: self.encoder(),
            num_queries: self.model.num_queries,
            layers: self.model.layers,
            heads: self.model.heads,
            query_dim: self.model.query_dim,
            num_classes,
            position_scale: self.model.position_scale,
        }
    }

    pub fn loss(&self) -> LossConfig {
        let t = &self.train;
        LossConfig {
            focal_weight: t.focal_weight,
            dice_weight: t.dice_weight,
            focal_alpha: t.focal_alpha,
            focal_gamma: t.focal_gamma,
            no_object_weight: t.no_object_weight,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        let t = &self.train;
        AdamWConfig {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
        }
    }

    pub fn augmentation(&self) -> Augmentation {
        let a = &self.train.augment;
        Augmentation {
            random_yaw: a.random_yaw,
            scale_min: a.scale_min,
            scale_max: a.scale_max,
        }
    }
}
