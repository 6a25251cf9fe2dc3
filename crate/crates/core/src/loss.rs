//! Set-prediction objective: ground-truth class-mask pairs, soft masks,
//! prototype dropout, no-object padding, the matching cost and the matched
//! cross-entropy plus mask loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::cloud::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::graph::{focal_term, Graph, Var};
use crate::matching::{CostMatrix, Matching};
use crate::tensor::{sigmoid_f64, Real, Tensor};

/// Weights and shape parameters of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub focal_weight: f32,
    pub dice_weight: f32,
    pub focal_alpha: f32,
    pub focal_gamma: f32,
    /// Cross-entropy weight of rows whose target is the no-object class.
    pub no_object_weight: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_weight: 1.0,
            dice_weight: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            no_object_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.focal_weight,
            self.dice_weight,
            self.focal_gamma,
            self.no_object_weight,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || !(0.0..=1.0).contains(&self.focal_alpha)
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative, alpha in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// One ground-truth segment: a class in `1..=C` and its binary point mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthPair {
    pub class: u16,
    pub mask: Vec<bool>,
}

/// One pair per class present in `labels`, in ascending class order.
/// Ignored points belong to no mask.
pub fn build_ground_truth_pairs(labels: &[u16]) -> Vec<GroundTruthPair> {
    let mut classes: Vec<u16> = labels
        .iter()
        .copied()
        .filter(|&l| l != IGNORE_LABEL)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| GroundTruthPair {
            class: c,
            mask: labels.iter().map(|&l| l == c).collect(),
        })
        .collect()
}

/// Indices of points whose label is not ignored.
pub fn valid_points(labels: &[u16]) -> Vec<usize> {
    (0..labels.len())
        .filter(|&i| labels[i] != IGNORE_LABEL)
        .collect()
}

/// `sigmoid(P · Fᵀ)`: one row of length `N` per prototype.
pub fn soft_masks(features: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || prototypes.rank() != 2 || features.cols() != prototypes.cols() {
        return Err(Error::shape(
            "soft_masks",
            features.shape(),
            prototypes.shape(),
        ));
    }
    let (n, k) = (features.rows(), prototypes.rows());
    let mut data = Vec::with_capacity(n * k);
    for q in 0..k {
        let p = prototypes.row(q);
        for i in 0..n {
            let dot: f64 = features
                .row(i)
                .iter()
                .zip(p)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            data.push(sigmoid_f64(dot) as f32);
        }
    }
    Tensor::matrix(k, n, data)
}

/// Mask logits `P · Fᵀ` on the tape (`N_q x N`).
pub fn mask_logits<T: Real>(g: &mut Graph<T>, features: Var, prototypes: Var) -> Result<Var> {
    let ft = g.transpose(features)?;
    g.matmul(prototypes, ft)
}

/// Drops a uniformly random `m`-subset of `0..num_queries`; returns the
/// surviving indices in ascending order.
pub fn prototype_dropout<R: Rng + ?Sized>(
    num_queries: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if m >= num_queries {
        return Err(Error::contract(format!(
            "cannot drop {m} of {num_queries} prototypes; need m < N_q"
        )));
    }
    let mut keep = vec![true; num_queries];
    for i in rand::seq::index::sample(rng, num_queries, m) {
        keep[i] = false;
    }
    Ok((0..num_queries).filter(|&i| keep[i]).collect())
}

/// Ground truth padded with no-object tokens to a fixed size. Rows
/// `0..pairs.len()` are real segments; the rest are no-object.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedGroundTruth {
    pairs: Vec<GroundTruthPair>,
    size: usize,
}

impl PaddedGroundTruth {
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn real(&self) -> &[GroundTruthPair] {
        &self.pairs
    }

    pub fn padding(&self) -> usize {
        self.size - self.pairs.len()
    }

    /// Class of row `i`, or `None` for a no-object token.
    pub fn class(&self, i: usize) -> Option<u16> {
        self.pairs.get(i).map(|p| p.class)
    }
}

pub fn pad_ground_truth(pairs: Vec<GroundTruthPair>, target: usize) -> Result<PaddedGroundTruth> {
    if pairs.len() > target {
        return Err(Error::contract(format!(
            "{} ground-truth segments exceed {target} surviving predictions; raise num_queries or lower the dropout count",
            pairs.len()
        )));
    }
    Ok(PaddedGroundTruth {
        pairs,
        size: target,
    })
}

/// Focal plus dice loss of a soft mask `m` (probabilities) against a binary mask.
pub fn mask_loss(gt: &[bool], m: &[f32], cfg: &LossConfig) -> Result<f64> {
    if gt.len() != m.len() {
        return Err(Error::contract(format!(
            "mask lengths differ: {} vs {}",
            gt.len(),
            m.len()
        )));
    }
    let (alpha, gamma) = (cfg.focal_alpha as f64, cfg.focal_gamma as f64);
    let mut focal = 0.0f64;
    let (mut inter, mut sp, mut st) = (0.0f64, 0.0f64, 0.0f64);
    for (&t, &p) in gt.iter().zip(m) {
        let p = p as f64;
        let (pt, at) = if t {
            (p, alpha)
        } else {
            (1.0 - p, 1.0 - alpha)
        };
        focal += -at * libm::pow(1.0 - pt, gamma) * libm::log(pt.max(1e-300));
        let t = t as u8 as f64;
        inter += p * t;
        sp += p;
        st += t;
    }
    let focal = focal / gt.len().max(1) as f64;
    let dice = 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0);
    Ok(cfg.focal_weight as f64 * focal + cfg.dice_weight as f64 * dice)
}

/// `cost(i, k) = -s_k(c_i) + [c_i real] · mask_loss(m_i^gt, m_k)` between the
/// padded ground truth (rows) and surviving predictions (columns).
///
/// `scores` is `K x (C + 1)` and `logits` the `K x N` mask logits of the
/// surviving predictions.
pub fn matching_cost(
    scores: &Tensor,
    logits: &Tensor,
    gt: &PaddedGroundTruth,
    cfg: &LossConfig,
) -> Result<CostMatrix> {
    let k = scores.rows();
    if gt.len() != k || logits.rows() != k {
        return Err(Error::contract(format!(
            "matching needs equal set sizes: {} targets, {k} scores, {} masks",
            gt.len(),
            logits.rows()
        )));
    }
    let n = logits.cols();
    let num_classes = scores.cols() - 1;
    for p in gt.real() {
        if p.mask.len() != n {
            return Err(Error::contract(format!(
                "gt mask of {} points for {n} mask logits",
                p.mask.len()
            )));
        }
        if p.class == IGNORE_LABEL || p.class as usize > num_classes {
            return Err(Error::contract(format!(
                "gt class {} outside 1..={num_classes}",
                p.class
            )));
        }
    }
    let (alpha, gamma) = (cfg.focal_alpha as f64, cfg.focal_gamma as f64);
    // Per prediction: focal terms for target 0 and the per-point difference
    // to target 1, and the sigmoid values for dice.
    let mut neg_sum = vec![0.0f64; k];
    let mut diff = vec![0.0f64; k * n];
    let mut sig = vec![0.0f64; k * n];
    for q in 0..k {
        for (j, &x) in logits.row(q).iter().enumerate() {
            let x = x as f64;
            let f0 = focal_term(x, 0.0, alpha, gamma).0;
            let f1 = focal_term(x, 1.0, alpha, gamma).0;
            neg_sum[q] += f0;
            diff[q * n + j] = f1 - f0;
            sig[q * n + j] = sigmoid_f64(x);
        }
    }
    let sig_sum: Vec<f64> = (0..k)
        .map(|q| sig[q * n..(q + 1) * n].iter().sum())
        .collect();
    let mut data = vec![0.0f64; k * k];
    for i in 0..k {
        match gt.real().get(i) {
            None => {
                for q in 0..k {
                    data[i * k + q] = -(scores.at(q, num_classes) as f64);
                }
            }
            Some(pair) => {
                let members: Vec<usize> = (0..n).filter(|&j| pair.mask[j]).collect();
                let st = members.len() as f64;
                let col = pair.class as usize - 1;
                for q in 0..k {
                    let row = q * n;
                    let (mut pos, mut inter) = (0.0f64, 0.0f64);
                    for &j in &members {
                        pos += diff[row + j];
                        inter += sig[row + j];
                    }
                    let focal = (neg_sum[q] + pos) / n.max(1) as f64;
                    let dice = 1.0 - (2.0 * inter + 1.0) / (sig_sum[q] + st + 1.0);
                    data[i * k + q] = -(scores.at(q, col) as f64)
                        + cfg.focal_weight as f64 * focal
                        + cfg.dice_weight as f64 * dice;
                }
            }
        }
    }
    CostMatrix::new(k, data)
}

/// Loss graph node plus the value of each term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cross_entropy: f64,
    pub focal: f64,
    pub dice: f64,
}

/// Matched loss `Σ_i [-w_i log s'_{σ(i)}(c_i) + [c_i real] L_mask(m_i^gt, m'_{σ(i)})]`.
///
/// `class_logits` (`N_q x (C + 1)`) and `mask_logits` (`N_q x N`) cover all
/// queries; `kept` lists the surviving query per matching column, so row `i`
/// of the padded ground truth is matched to query `kept[σ(i)]`.
pub fn napl_loss<T: Real>(
    g: &mut Graph<T>,
    class_logits: Var,
    mask_logits: Var,
    kept: &[usize],
    gt: &PaddedGroundTruth,
    sigma: &Matching,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let size = gt.len();
    if sigma.len() != size || kept.len() != size {
        return Err(Error::contract(format!(
            "matching covers {} rows and {} predictions for {size} targets",
            sigma.len(),
            kept.len()
        )));
    }
    Matching::new(sigma.as_slice().to_vec(), kept.len())?;
    let num_classes = g.value(class_logits).cols() - 1;
    let n = g.value(mask_logits).cols();
    let rows: Vec<usize> = (0..size).map(|i| kept[sigma.column(i)]).collect();

    let logp = g.log_softmax(class_logits);
    let matched = g.gather_rows(logp, &rows)?;
    let mut targets = Vec::with_capacity(size);
    let mut weights = Vec::with_capacity(size);
    for i in 0..size {
        match gt.class(i) {
            Some(c) if c != IGNORE_LABEL && (c as usize) <= num_classes => {
                targets.push(c as usize - 1);
                weights.push(1.0);
            }
            Some(c) => {
                return Err(Error::contract(format!(
                    "gt class {c} outside 1..={num_classes}"
                )))
            }
            None => {
                targets.push(num_classes);
                weights.push(cfg.no_object_weight);
            }
        }
    }
    let ce = g.nll(matched, &targets, &weights)?;
    let cross_entropy = g.value(ce).item().to_f64();

    let real = gt.real();
    if real.is_empty() {
        return Ok(LossTerms {
            total: ce,
            cross_entropy,
            focal: 0.0,
            dice: 0.0,
        });
    }
    let mut flat = Vec::with_capacity(real.len() * n);
    for p in real {
        if p.mask.len() != n {
            return Err(Error::contract(format!(
                "gt mask of {} points for {n} mask logits",
                p.mask.len()
            )));
        }
        flat.extend(p.mask.iter().map(|&b| b as u8 as f32));
    }
    let masks = g.gather_rows(mask_logits, &rows[..real.len()])?;
    let focal = g.focal_rows(masks, &flat, cfg.focal_alpha, cfg.focal_gamma)?;
    let focal = g.sum(focal);
    let dice = g.dice_rows(masks, &flat)?;
    let dice = g.sum(dice);
    let (fv, dv) = (g.value(focal).item().to_f64(), g.value(dice).item().to_f64());
    let wf = g.scale(focal, cfg.focal_weight);
    let wd = g.scale(dice, cfg.dice_weight);
    let mask_total = g.add(wf, wd)?;
    let total = g.add(ce, mask_total)?;
    Ok(LossTerms {
        total,
        cross_entropy,
        focal: fv,
        dice: dv,
    })
}
