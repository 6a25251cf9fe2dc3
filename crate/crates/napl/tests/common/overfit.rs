//! Memorizing one synthetic scene: a point-wise pretraining run, then the
//! prototype model on the pretrained backbone.

use std::path::Path;
use std::time::{Duration, Instant};

use napl::train::{train_napl_on, train_pwc_on};
use napl::{Ablation, Dataset, RunConfig, Split, SyntheticManifest};

pub const STEPS: usize = 500;

pub struct OverfitResult {
    pub miou: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    /// Both phases.
    pub elapsed: Duration,
}

/// One scene as both train and val split, one scene per step, no dropout,
/// no augmentation, no weight decay.
pub fn overfit(dir: &Path) -> OverfitResult {
    let mut cfg = RunConfig::synthetic();
    cfg.train.batch_size = 1;
    cfg.train.epochs = STEPS;
    cfg.train.augment.random_yaw = false;
    cfg.train.weight_decay = 0.0;
    cfg.train.lr_power = 0.5;
    cfg.train.pwc_lr = 3e-3;
    cfg.train.backbone_lr = 1e-5;
    let manifest = SyntheticManifest::new(cfg.synthetic.dataset_seed, 1, 0);
    let scene = Dataset::synthetic(&manifest, Split::Train);

    let start = Instant::now();
    let pwc = train_pwc_on(&cfg, &scene, &scene, &dir.join("pwc")).expect("point-wise phase");
    cfg.ablation = Ablation::C.flags();
    let out = train_napl_on(&cfg, Some(&pwc.checkpoint), &scene, &scene, &dir.join("napl")).expect("prototype phase");
    OverfitResult {
        miou: out.metrics.miou,
        final_loss: *out.epoch_losses.last().expect("at least one step"),
        losses: out.epoch_losses,
        elapsed: start.elapsed(),
    }
}
