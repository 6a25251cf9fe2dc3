//! Scene sources for training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use napl_core::synthetic::{generate_synthetic_scene, scene_seed, SyntheticSceneConfig};
use napl_core::PointCloud;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, RunConfig};
use crate::error::{NaplError, Result};
use crate::kitti::{list_frames, load_kitti_scan, LabelRemap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Seeds of every synthetic scene, by split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticManifest {
    pub dataset_seed: u64,
    pub class_names: Vec<String>,
    pub bimodal_classes: Vec<u16>,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl SyntheticManifest {
    pub fn new(dataset_seed: u64, train: usize, val: usize) -> Self {
        let scene_cfg = SyntheticSceneConfig::street(dataset_seed);
        let seeds: Vec<u64> = (0..(train + val) as u64)
            .map(|i| scene_seed(dataset_seed, i))
            .collect();
        SyntheticManifest {
            dataset_seed,
            class_names: scene_cfg.classes.iter().map(|c| c.name.clone()).collect(),
            bimodal_classes: scene_cfg.bimodal_classes(),
            train: seeds[..train].to_vec(),
            val: seeds[train..].to_vec(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NaplError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| NaplError::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| NaplError::io(path, e))
    }
}

enum Source {
    Synthetic {
        cfg: SyntheticSceneConfig,
        seeds: Vec<u64>,
    },
    Kitti {
        frames: Vec<(PathBuf, Option<PathBuf>)>,
        remap: LabelRemap,
    },
}

/// An indexed, lazily loaded list of labeled scenes.
pub struct Dataset {
    source: Source,
    class_names: Vec<String>,
    bimodal_classes: Vec<u16>,
}

impl Dataset {
    /// Opens `split` as described by `cfg`. A synthetic dataset reads
    /// `data_root/manifest.json` when `data_root` is set and otherwise
    /// derives the manifest from the config.
    pub fn open(cfg: &RunConfig, split: Split) -> Result<Self> {
        match cfg.dataset {
            DatasetKind::Synthetic => {
                let manifest = match &cfg.data_root {
                    Some(root) => {
                        let path = root.join(MANIFEST_FILE);
                        if !path.exists() {
                            return Err(NaplError::Data(format!(
                                "{} not found; run gen-data first",
                                path.display()
                            )));
                        }
                        SyntheticManifest::from_file(&path)?
                    }
                    None => SyntheticManifest::new(
                        cfg.synthetic.dataset_seed,
                        cfg.synthetic.train_scenes,
                        cfg.synthetic.val_scenes,
                    ),
                };
                Ok(Self::synthetic(&manifest, split))
            }
            DatasetKind::Kitti => {
                let root = cfg
                    .data_root
                    .as_ref()
                    .ok_or_else(|| NaplError::Config("the kitti dataset needs data_root".into()))?;
                if !root.is_dir() {
                    return Err(NaplError::Data(format!(
                        "dataset root {} does not exist",
                        root.display()
                    )));
                }
                let remap = LabelRemap::semantic_kitti();
                let sequences = remap.splits.get(split.name()).cloned().unwrap_or_default();
                let frames = list_frames(root, &sequences)?;
                Ok(Dataset {
                    class_names: remap.classes.clone(),
                    bimodal_classes: Vec::new(),
                    source: Source::Kitti { frames, remap },
                })
            }
        }
    }

    pub fn synthetic(manifest: &SyntheticManifest, split: Split) -> Self {
        let seeds = match split {
            Split::Train => manifest.train.clone(),
            Split::Val => manifest.val.clone(),
        };
        Dataset {
            source: Source::Synthetic {
                cfg: SyntheticSceneConfig::street(manifest.dataset_seed),
                seeds,
            },
            class_names: manifest.class_names.clone(),
            bimodal_classes: manifest.bimodal_classes.clone(),
        }
    }

    /// A synthetic dataset over explicit scene seeds.
    pub fn synthetic_seeds(cfg: SyntheticSceneConfig, seeds: Vec<u64>) -> Self {
        Dataset {
            class_names: cfg.classes.iter().map(|c| c.name.clone()).collect(),
            bimodal_classes: cfg.bimodal_classes(),
            source: Source::Synthetic { cfg, seeds },
        }
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Synthetic { seeds, .. } => seeds.len(),
            Source::Kitti { frames, .. } => frames.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn bimodal_classes(&self) -> &[u16] {
        &self.bimodal_classes
    }

    pub fn load(&self, index: usize) -> Result<PointCloud> {
        match &self.source {
            Source::Synthetic { cfg, seeds } => Ok(generate_synthetic_scene(cfg, seeds[index])?),
            Source::Kitti { frames, remap } => {
                let (scan, label) = &frames[index];
                load_kitti_scan(scan, label.as_deref(), remap)
            }
        }
    }
}
