//! Independent 64-bit reference implementations, written term by term from
//! the textbook formulas without sharing code with the crate.

use napl_core::encoder::{pwc_classify, pwc_loss as crate_pwc_loss};
use napl_core::inference::{accumulate_confusion, miou as crate_miou};
use napl_core::loss::{mask_loss as crate_mask_loss, napl_loss as crate_napl_loss, pad_ground_truth, GroundTruthPair};
use napl_core::{ConfusionMatrix, Graph, LossConfig, Matching, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inputs of one set-prediction loss instance.
pub struct LossInstance {
    /// `K x (C + 1)` class logits of all queries.
    pub class_logits: Vec<Vec<f64>>,
    /// `K x N` mask logits of all queries.
    pub mask_logits: Vec<Vec<f64>>,
    /// Surviving queries, one per matching column.
    pub kept: Vec<usize>,
    /// Real segments `(class, mask)`; rows past these are no-object.
    pub segments: Vec<(u16, Vec<bool>)>,
    /// Matching column of every padded ground-truth row.
    pub sigma: Vec<usize>,
}

pub struct LossWeights {
    pub focal: f64,
    pub dice: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub no_object: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `-α_t (1 - p_t)^γ log p_t` averaged over points.
pub fn focal(gt: &[bool], p: &[f64], alpha: f64, gamma: f64) -> f64 {
    let mut total = 0.0;
    for (&t, &pi) in gt.iter().zip(p) {
        let (pt, at) = if t { (pi, alpha) } else { (1.0 - pi, 1.0 - alpha) };
        total += -at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    total / gt.len() as f64
}

/// `1 - (2 Σ p t + 1) / (Σ p + Σ t + 1)`.
pub fn dice(gt: &[bool], p: &[f64]) -> f64 {
    let inter: f64 = gt.iter().zip(p).map(|(&t, &pi)| if t { pi } else { 0.0 }).sum();
    let sp: f64 = p.iter().sum();
    let st = gt.iter().filter(|&&t| t).count() as f64;
    1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0)
}

pub fn mask_loss(gt: &[bool], p: &[f64], w: &LossWeights) -> f64 {
    w.focal * focal(gt, p, w.alpha, w.gamma) + w.dice * dice(gt, p)
}

/// Σ_i [-w_i log softmax(x_q)(c_i) + [c_i real] L_mask(gt_i, sigmoid(m_q))]
/// with `q = kept[σ(i)]`.
pub fn napl_loss(inst: &LossInstance, w: &LossWeights) -> f64 {
    let no_object = inst.class_logits[0].len() - 1;
    let mut total = 0.0;
    for (i, &col) in inst.sigma.iter().enumerate() {
        let q = inst.kept[col];
        let x = &inst.class_logits[q];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let (target, weight) = match inst.segments.get(i) {
            Some((c, _)) => (*c as usize - 1, 1.0),
            None => (no_object, w.no_object),
        };
        total += -weight * (x[target].exp() / z).ln();
        if let Some((_, mask)) = inst.segments.get(i) {
            let p: Vec<f64> = inst.mask_logits[q].iter().map(|&v| logistic(v)).collect();
            total += mask_loss(mask, &p, w);
        }
    }
    total
}

/// Mean `-log p(label)` over points whose label is not 0.
pub fn pwc_loss(probs: &[Vec<f64>], labels: &[u16]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (row, &l) in probs.iter().zip(labels) {
        if l != 0 {
            total -= row[l as usize - 1].ln();
            n += 1;
        }
    }
    total / n as f64
}

/// Per-class IoU straight from label arrays, skipping points labelled 0 in
/// the ground truth; `None` where the class never occurs in either.
pub fn per_class_iou(pred: &[u16], gt: &[u16], classes: usize) -> Vec<Option<f64>> {
    (1..=classes as u16)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&p, &g) in pred.iter().zip(gt) {
                if g == 0 {
                    continue;
                }
                match (p == c, g == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

pub fn miou(pred: &[u16], gt: &[u16], classes: usize) -> f64 {
    let ious: Vec<f64> = per_class_iou(pred, gt, classes).into_iter().flatten().collect();
    ious.iter().sum::<f64>() / ious.len() as f64
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub const INSTANCES: usize = 50;
pub const TOLERANCE: f64 = 1e-6;

/// Worst relative disagreement of one function over its random instances.
pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub crate_value: f64,
    pub oracle_value: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

fn compare(name: &'static str, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> (f64, f64)) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = OracleResult { name, instances: INSTANCES, worst: 0.0, crate_value: 0.0, oracle_value: 0.0 };
    for _ in 0..INSTANCES {
        let (got, want) = case(&mut rng);
        let e = relative_error(got, want);
        if e > r.worst || !e.is_finite() {
            r.worst = e;
            r.crate_value = got;
            r.oracle_value = want;
        }
    }
    r
}

/// f32 values widened to f64, so both sides see identical inputs.
fn values(rng: &mut ChaCha8Rng, n: usize, range: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-range..range)).collect()
}

fn random_weights(rng: &mut ChaCha8Rng) -> (LossConfig, LossWeights) {
    let cfg = LossConfig {
        focal_weight: rng.random_range(0.5f32..2.0),
        dice_weight: rng.random_range(0.5f32..2.0),
        focal_alpha: rng.random_range(0.1f32..0.9),
        focal_gamma: [0.0f32, 1.0, 1.5, 2.0][rng.random_range(0..4)],
        no_object_weight: rng.random_range(0.05f32..1.0),
    };
    let w = LossWeights {
        focal: cfg.focal_weight as f64,
        dice: cfg.dice_weight as f64,
        alpha: cfg.focal_alpha as f64,
        gamma: cfg.focal_gamma as f64,
        no_object: cfg.no_object_weight as f64,
    };
    (cfg, w)
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    m[rng.random_range(0..n)] = true;
    m
}

fn napl_loss_case(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let classes = rng.random_range(2..6usize);
    let queries = rng.random_range(3..9usize);
    let points = rng.random_range(4..30usize);
    let size = rng.random_range(2..=queries);
    let real = rng.random_range(0..=size.min(classes));
    let (cfg, w) = random_weights(rng);

    let cl = values(rng, queries * (classes + 1), 3.0);
    let ml = values(rng, queries * points, 4.0);
    let mut kept: Vec<usize> = (0..queries).collect();
    kept.shuffle(rng);
    kept.truncate(size);
    let mut sigma: Vec<usize> = (0..size).collect();
    sigma.shuffle(rng);
    let mut class_ids: Vec<u16> = (1..=classes as u16).collect();
    class_ids.shuffle(rng);
    let segments: Vec<(u16, Vec<bool>)> = class_ids[..real]
        .iter()
        .map(|&c| (c, random_mask(rng, points)))
        .collect();

    let pairs = segments
        .iter()
        .map(|(c, m)| GroundTruthPair { class: *c, mask: m.clone() })
        .collect();
    let gt = pad_ground_truth(pairs, size).unwrap();
    let matching = Matching::new(sigma.clone(), size).unwrap();
    let mut g: Graph = Graph::new();
    let c = g.constant(Tensor::matrix(queries, classes + 1, cl.clone()).unwrap());
    let m = g.constant(Tensor::matrix(queries, points, ml.clone()).unwrap());
    let terms = crate_napl_loss(&mut g, c, m, &kept, &gt, &matching, &cfg).unwrap();
    let got = g.value(terms.total).item() as f64;

    let rows = |v: &[f32], w: usize| -> Vec<Vec<f64>> {
        v.chunks(w).map(|r| r.iter().map(|&x| x as f64).collect()).collect()
    };
    let inst = LossInstance {
        class_logits: rows(&cl, classes + 1),
        mask_logits: rows(&ml, points),
        kept,
        segments,
        sigma,
    };
    (got, napl_loss(&inst, &w))
}

fn mask_loss_case(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = rng.random_range(1..200usize);
    let (cfg, w) = random_weights(rng);
    let gt = random_mask(rng, n);
    let p: Vec<f32> = (0..n).map(|_| rng.random_range(0.01f32..0.99)).collect();
    let wide: Vec<f64> = p.iter().map(|&x| x as f64).collect();
    (crate_mask_loss(&gt, &p, &cfg).unwrap(), mask_loss(&gt, &wide, &w))
}

fn pwc_loss_case(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let classes = rng.random_range(2..8usize);
    let points = rng.random_range(1..100usize);
    let d = rng.random_range(1..6usize);
    let f = values(rng, points * d, 1.0);
    let wt = values(rng, d * classes, 1.0);
    let b = values(rng, classes, 1.0);
    let mut labels: Vec<u16> = (0..points).map(|_| rng.random_range(0..=classes as u16)).collect();
    labels[0] = rng.random_range(1..=classes as u16);
    let probs = pwc_classify(
        &Tensor::matrix(points, d, f.clone()).unwrap(),
        &Tensor::matrix(d, classes, wt.clone()).unwrap(),
        &Tensor::vector(b.clone()),
    )
    .unwrap();
    let got = crate_pwc_loss(&probs, &labels).unwrap();

    let oracle_probs: Vec<Vec<f64>> = (0..points)
        .map(|i| {
            let z: Vec<f64> = (0..classes)
                .map(|c| b[c] as f64 + (0..d).map(|k| f[i * d + k] as f64 * wt[k * classes + c] as f64).sum::<f64>())
                .collect();
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            z.iter().map(|v| v.exp() / s).collect()
        })
        .collect();
    (got, pwc_loss(&oracle_probs, &labels))
}

fn miou_case(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let classes = rng.random_range(2..10usize);
    let n = rng.random_range(1..500usize);
    let gt: Vec<u16> = (0..n).map(|_| rng.random_range(0..=classes as u16)).collect();
    let mut gt = gt;
    gt[0] = rng.random_range(1..=classes as u16);
    let pred: Vec<u16> = gt
        .iter()
        .map(|&g| if g != 0 && rng.random_bool(0.6) { g } else { rng.random_range(1..=classes as u16) })
        .collect();
    let mut cm = ConfusionMatrix::new(classes);
    accumulate_confusion(&pred, &gt, &mut cm).unwrap();
    (crate_miou(&cm).unwrap().mean, miou(&pred, &gt, classes))
}

/// Every loss and metric against its oracle on [`INSTANCES`] random inputs.
pub fn oracle_checks() -> Vec<OracleResult> {
    vec![
        compare("napl_loss", 11, napl_loss_case),
        compare("mask_loss", 12, mask_loss_case),
        compare("pwc_loss", 13, pwc_loss_case),
        compare("miou", 14, miou_case),
    ]
}
