//! Labeling points from prototypes, prototype-count statistics and mIoU.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::IGNORE_LABEL;
use crate::decoder::PrototypeSet;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid_f64, Tensor};

/// Per-point class labels in `1..=C`, with the prototype that contributed
/// most to each label when known.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationResult {
    pub labels: Vec<u16>,
    pub winners: Option<Vec<usize>>,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn check_widths(features: &Tensor, protos: &PrototypeSet) -> Result<()> {
    let p = protos.prototypes();
    if features.rank() != 2 || features.cols() != p.cols() {
        return Err(Error::shape("inference", features.shape(), p.shape()));
    }
    Ok(())
}

/// `ĉ_i = argmax_{c ≤ C} Σ_k sigmoid(f_iᵀ p_k) · s_k^c`, ties toward the
/// smaller class. The winner of point `i` is the `k` maximizing
/// `sigmoid(f_iᵀ p_k) · s_k^{ĉ_i}`, ties toward the smaller index.
pub fn semantic_inference(features: &Tensor, protos: &PrototypeSet) -> Result<SegmentationResult> {
    check_widths(features, protos)?;
    let c = protos.num_classes();
    let (p, s) = (protos.prototypes(), protos.scores());
    let mut labels = Vec::with_capacity(features.rows());
    let mut winners = Vec::with_capacity(features.rows());
    let mut mask = vec![0.0f64; protos.len()];
    let mut acc = vec![0.0f64; c];
    for i in 0..features.rows() {
        let f = features.row(i);
        acc.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..protos.len() {
            mask[k] = sigmoid_f64(dot(f, p.row(k)));
            for (a, &sv) in acc.iter_mut().zip(&s.row(k)[..c]) {
                *a += mask[k] * sv as f64;
            }
        }
        let mut best = 0;
        for j in 1..c {
            if acc[j] > acc[best] {
                best = j;
            }
        }
        let mut winner = 0;
        let mut top = f64::NEG_INFINITY;
        for (k, &m) in mask.iter().enumerate() {
            let v = m * s.at(k, best) as f64;
            if v > top {
                top = v;
                winner = k;
            }
        }
        labels.push(best as u16 + 1);
        winners.push(winner);
    }
    Ok(SegmentationResult {
        labels,
        winners: Some(winners),
    })
}

/// Distance used by [`nearest_prototype_assign`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Distance {
    /// `-fᵀp`.
    #[default]
    NegativeDot,
    Euclidean,
}

/// Labels each point with the class of its nearest non-no-object prototype.
pub fn nearest_prototype_assign(
    features: &Tensor,
    protos: &PrototypeSet,
    distance: Distance,
) -> Result<SegmentationResult> {
    check_widths(features, protos)?;
    let live: Vec<(usize, u16)> = (0..protos.len())
        .filter_map(|k| protos.class_of(k).map(|c| (k, c)))
        .collect();
    if live.is_empty() {
        return Err(Error::contract(
            "every prototype predicts no-object; use semantic_inference instead",
        ));
    }
    let p = protos.prototypes();
    let mut labels = Vec::with_capacity(features.rows());
    let mut winners = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let f = features.row(i);
        let mut best = (f64::INFINITY, 0usize, 0u16);
        for &(k, c) in &live {
            let d = match distance {
                Distance::NegativeDot => -dot(f, p.row(k)),
                Distance::Euclidean => f
                    .iter()
                    .zip(p.row(k))
                    .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
                    .sum(),
            };
            if d < best.0 {
                best = (d, k, c);
            }
        }
        labels.push(best.2);
        winners.push(best.1);
    }
    Ok(SegmentationResult {
        labels,
        winners: Some(winners),
    })
}

/// Active prototypes per class for one frame (index `c - 1`): prototype `k`
/// counts for class `c` when its argmax class is `c` and it is the winner of
/// at least one point under [`semantic_inference`].
pub fn count_prototypes(protos: &PrototypeSet, features: &Tensor) -> Result<Vec<u32>> {
    let result = semantic_inference(features, protos)?;
    let mut active = vec![false; protos.len()];
    for (&k, &label) in result.winners.iter().flatten().zip(&result.labels) {
        if protos.class_of(k) == Some(label) {
            active[k] = true;
        }
    }
    let mut counts = vec![0u32; protos.num_classes()];
    for (k, _) in active.iter().enumerate().filter(|(_, &a)| a) {
        if let Some(c) = protos.class_of(k) {
            counts[c as usize - 1] += 1;
        }
    }
    Ok(counts)
}

/// Running per-class prototype counts. Averages are taken over the frames
/// in which the class occurs in the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeStats {
    totals: Vec<u64>,
    frames_present: Vec<u64>,
    frames: u64,
}

impl PrototypeStats {
    pub fn new(num_classes: usize) -> Self {
        PrototypeStats {
            totals: vec![0; num_classes],
            frames_present: vec![0; num_classes],
            frames: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.totals.len()
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    /// Adds one frame. `present[c - 1]` marks classes in the frame's labels.
    pub fn record(&mut self, counts: &[u32], present: &[bool]) -> Result<()> {
        let c = self.totals.len();
        if counts.len() != c || present.len() != c {
            return Err(Error::contract(format!(
                "stats for {c} classes got {} counts and {} presence flags",
                counts.len(),
                present.len()
            )));
        }
        for j in 0..c {
            if present[j] {
                self.totals[j] += counts[j] as u64;
                self.frames_present[j] += 1;
            }
        }
        self.frames += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &PrototypeStats) -> Result<()> {
        if other.totals.len() != self.totals.len() {
            return Err(Error::contract(
                "cannot merge stats over different class counts",
            ));
        }
        for j in 0..self.totals.len() {
            self.totals[j] += other.totals[j];
            self.frames_present[j] += other.frames_present[j];
        }
        self.frames += other.frames;
        Ok(())
    }

    /// Average count of class `c` (index `c - 1`), `None` if never present.
    pub fn averages(&self) -> Vec<Option<f64>> {
        self.totals
            .iter()
            .zip(&self.frames_present)
            .map(|(&t, &n)| (n > 0).then(|| t as f64 / n as f64))
            .collect()
    }

    pub fn frames_present(&self) -> &[u64] {
        &self.frames_present
    }
}

/// Which classes occur in `labels` (index `c - 1`).
pub fn classes_present(labels: &[u16], num_classes: usize) -> Vec<bool> {
    let mut present = vec![false; num_classes];
    for &l in labels {
        if l != IGNORE_LABEL && (l as usize) <= num_classes {
            present[l as usize - 1] = true;
        }
    }
    present
}

/// `C x C` counts indexed `[gt - 1][pred - 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Count of points with ground truth `gt` predicted as `pred` (both `1..=C`).
    pub fn get(&self, gt: u16, pred: u16) -> u64 {
        self.counts[(gt as usize - 1) * self.num_classes + pred as usize - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::contract(
                "cannot merge confusion matrices of different sizes",
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Adds one count per non-ignored point. Labels outside `1..=C` are rejected
/// before anything is counted.
pub fn accumulate_confusion(pred: &[u16], gt: &[u16], cm: &mut ConfusionMatrix) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let c = cm.num_classes;
    for (&p, &t) in pred.iter().zip(gt) {
        if t == IGNORE_LABEL {
            continue;
        }
        if t as usize > c || p == IGNORE_LABEL || p as usize > c {
            return Err(Error::contract(format!(
                "label pair (gt {t}, pred {p}) outside 1..={c}"
            )));
        }
    }
    for (&p, &t) in pred.iter().zip(gt) {
        if t != IGNORE_LABEL {
            cm.counts[(t as usize - 1) * c + p as usize - 1] += 1;
        }
    }
    Ok(())
}

/// Per-class IoU (`None` where `TP + FP + FN = 0`) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<MiouReport> {
    if cm.total() == 0 {
        return Err(Error::contract("mIoU of an empty confusion matrix"));
    }
    let c = cm.num_classes;
    let mut per_class = Vec::with_capacity(c);
    for j in 0..c {
        let tp = cm.counts[j * c + j];
        let row: u64 = cm.counts[j * c..(j + 1) * c].iter().sum();
        let col: u64 = (0..c).map(|i| cm.counts[i * c + j]).sum();
        let denom = row + col - tp;
        per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, mean })
}
