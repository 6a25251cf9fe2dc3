//! Point feature extraction and the point-wise classification head.
//!
//! The extractor is a small U-Net over occupied voxels. Each downsampling
//! stage is a 2x2x2, stride-2 sparse convolution (one weight block per child
//! offset) followed by a pointwise layer; each upsampling stage is the
//! matching transposed convolution fused with the skip connection. Point
//! features are read off the finest level by nearest-voxel gather.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::cloud::{PointCloud, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Linear, Norm, ParamGroup, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::voxel::{devoxelize, voxelize, VoxelGrid, VoxelHierarchy, VOXEL_FEATURES};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub voxel_size: f32,
    /// Width of each downsampling stage; the stage count is the length.
    pub widths: Vec<usize>,
    /// Output feature dimension `D`.
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            voxel_size: 0.05,
            widths: vec![16, 32, 64, 128],
            feature_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.feature_dim == 0 {
            return Err(Error::Config(
                "encoder widths and feature_dim must be positive".into(),
            ));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Channel width at hierarchy level `l` (level 0 shares the first stage width).
    pub fn level_width(&self, l: usize) -> usize {
        self.widths[l.saturating_sub(1)]
    }

    pub fn deep_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// A cloud after voxelization, ready for repeated forward passes.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub grid: VoxelGrid,
    pub hierarchy: VoxelHierarchy,
    pub labels: Option<Vec<u16>>,
}

impl PreparedScene {
    pub fn new(pc: &PointCloud, cfg: &EncoderConfig) -> Result<Self> {
        let grid = voxelize(pc, cfg.voxel_size, [0.0; 3])?;
        let hierarchy = VoxelHierarchy::build(&grid, cfg.depth());
        Ok(PreparedScene {
            grid,
            hierarchy,
            labels: pc.labels().map(|l| l.to_vec()),
        })
    }

    pub fn num_points(&self) -> usize {
        self.grid.point_to_voxel().len()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DownStage {
    conv: Linear,
    conv_norm: Norm,
    mix: Linear,
    mix_norm: Norm,
}

#[derive(Clone, Debug, PartialEq)]
struct UpStage {
    conv: Linear,
    fuse: Linear,
    norm: Norm,
}

/// Parameter layout of the feature extractor inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    stem: Linear,
    stem_norm: Norm,
    down: Vec<DownStage>,
    up: Vec<UpStage>,
    head: Linear,
}

/// Per-point features plus the deepest-level voxel features that feed the
/// prototype decoder.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `N x D`.
    pub features: Var,
    /// `V_deep x widths.last()`.
    pub deep: Var,
    /// Centers of the deepest-level voxels, in meters.
    pub deep_centers: Vec<[f32; 3]>,
}

impl EncoderParams {
    /// Registers parameters under `encoder.*`. The stem and downsampling
    /// stages form the backbone group; the upsampling path and the output
    /// layer belong to the head group.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let bb = ParamGroup::Backbone;
        let hd = ParamGroup::Head;
        let w0 = cfg.level_width(0);
        let stem = Linear::new(store, "encoder.stem", VOXEL_FEATURES, w0, bb, rng);
        let stem_norm = Norm::new(store, "encoder.stem_norm", w0, bb);
        let mut down = Vec::new();
        for s in 1..=cfg.depth() {
            let (wi, wo) = (cfg.level_width(s - 1), cfg.level_width(s));
            down.push(DownStage {
                conv: Linear::new(store, &format!("encoder.down{s}.conv"), 8 * wi, wo, bb, rng),
                conv_norm: Norm::new(store, &format!("encoder.down{s}.conv_norm"), wo, bb),
                mix: Linear::new(store, &format!("encoder.down{s}.mix"), wo, wo, bb, rng),
                mix_norm: Norm::new(store, &format!("encoder.down{s}.mix_norm"), wo, bb),
            });
        }
        let mut up = Vec::new();
        for s in (1..=cfg.depth()).rev() {
            let (wi, wo) = (cfg.level_width(s), cfg.level_width(s - 1));
            up.push(UpStage {
                conv: Linear::new(store, &format!("encoder.up{s}.conv"), 8 * wi, wo, hd, rng),
                fuse: Linear::new(store, &format!("encoder.up{s}.fuse"), 2 * wo, wo, hd, rng),
                norm: Norm::new(store, &format!("encoder.up{s}.norm"), wo, hd),
            });
        }
        let head = Linear::new(store, "encoder.head", w0, cfg.feature_dim, hd, rng);
        Ok(EncoderParams {
            config: cfg.clone(),
            stem,
            stem_norm,
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// The output layer, exposed for initialization experiments.
    pub fn head(&self) -> Linear {
        self.head
    }

    pub fn extract_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        scene: &PreparedScene,
    ) -> Result<EncoderOutput> {
        let h = &scene.hierarchy;
        if h.depth() != self.config.depth() {
            return Err(Error::contract(format!(
                "scene prepared with depth {} for an encoder of depth {}",
                h.depth(),
                self.config.depth()
            )));
        }
        let input = g.constant(scene.grid.features().cast());
        let x = self.stem.forward(g, p, input)?;
        let x = self.stem_norm.forward(g, p, x)?;
        let mut x = g.relu(x);
        let mut skips = vec![x];
        for (s, stage) in self.down.iter().enumerate() {
            let cols = g.gather_slots(x, &h.down_slots(s), 8)?;
            let y = stage.conv.forward(g, p, cols)?;
            let y = stage.conv_norm.forward(g, p, y)?;
            let y = g.relu(y);
            let z = stage.mix.forward(g, p, y)?;
            let z = stage.mix_norm.forward(g, p, z)?;
            x = g.relu(z);
            skips.push(x);
        }
        let deep = x;
        for (i, stage) in self.up.iter().enumerate() {
            let level = self.config.depth() - 1 - i;
            let cols = g.gather_slots(x, &h.up_slots(level), 8)?;
            let u = stage.conv.forward(g, p, cols)?;
            let cat = g.concat_cols(&[u, skips[level]])?;
            let y = stage.fuse.forward(g, p, cat)?;
            let y = stage.norm.forward(g, p, y)?;
            x = g.relu(y);
        }
        let voxel_features = self.head.forward(g, p, x)?;
        let features = devoxelize(g, voxel_features, &scene.grid)?;
        let top = self.config.depth();
        let deep_centers = h
            .level(top)
            .voxels
            .iter()
            .map(|&v| scene.grid.center(v, top))
            .collect();
        Ok(EncoderOutput {
            features,
            deep,
            deep_centers,
        })
    }
}

/// Linear classifier over point features: one weight row `w_c` per class.
/// The weight is stored transposed (`D x C`) so that logits are `F · W`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PwcClassifier {
    pub linear: Linear,
    pub num_classes: usize,
}

impl PwcClassifier {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let linear = Linear::new(
            store,
            "pwc.classifier",
            feature_dim,
            num_classes,
            ParamGroup::Head,
            rng,
        );
        PwcClassifier {
            linear,
            num_classes,
        }
    }

    pub fn logits<T: Real>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let d = g.value(p.var(self.linear.weight)).rows();
        let width = g.value(features).cols();
        if width != d {
            return Err(Error::shape(
                "pwc_classify",
                g.shape(features),
                g.shape(p.var(self.linear.weight)),
            ));
        }
        self.linear.forward(g, p, features)
    }
}

/// Class probabilities `softmax(F · W + b)`, one row per point.
pub fn pwc_classify(features: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if weight.rank() != 2 || features.cols() != weight.rows() || bias.len() != weight.cols() {
        return Err(Error::shape(
            "pwc_classify",
            features.shape(),
            weight.shape(),
        ));
    }
    let mut g: Graph = Graph::new();
    let f = g.constant(features.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let logits = g.matmul(f, w)?;
    let logits = g.add_row(logits, b)?;
    let probs = g.softmax(logits);
    Ok(g.value(probs).clone())
}

/// Mean negative log-likelihood over non-ignored points, from probabilities.
/// Returns zero (with a warning) when every point is ignored.
pub fn pwc_loss(probs: &Tensor, labels: &[u16]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::contract(format!(
            "{} rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let c = probs.cols();
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l as usize > c {
            return Err(Error::contract(format!("label {l} outside 1..={c}")));
        }
        total -= libm::log(probs.at(i, l as usize - 1) as f64);
        n += 1;
    }
    if n == 0 {
        log::warn!("pwc_loss: every point is ignored; loss defined as 0");
        return Ok(0.0);
    }
    Ok(total / n as f64)
}

/// Differentiable [`pwc_loss`] on logits, used for training.
pub fn pwc_loss_graph<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[u16]) -> Result<Var> {
    let c = g.value(logits).cols();
    let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        log::warn!("pwc_loss: every point is ignored; loss defined as 0");
        return Ok(g.constant(Tensor::scalar(T::ZERO)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > c) {
        return Err(Error::contract(format!("label {bad} outside 1..={c}")));
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|&l| (l as usize).saturating_sub(1))
        .collect();
    let weights: Vec<f32> = labels
        .iter()
        .map(|&l| {
            if l == IGNORE_LABEL {
                0.0
            } else {
                1.0 / valid as f32
            }
        })
        .collect();
    let logp = g.log_softmax(logits);
    g.nll(logp, &targets, &weights)
}
