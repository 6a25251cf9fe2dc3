//! Finite-difference checks of every differentiable operation, the composed
//! losses and the network blocks, each on random small instances in f64.

use napl_core::decoder::{attention_block, AttentionParams, DecoderConfig, DecoderParams, QuerySet};
use napl_core::encoder::{EncoderConfig, EncoderParams, PreparedScene};
use napl_core::gradcheck::{check_gradients, GradCheck};
use napl_core::loss::{
    build_ground_truth_pairs, matching_cost, napl_loss, pad_ground_truth, LossConfig,
};
use napl_core::params::Bound;
use napl_core::{hungarian_match, Graph, ParamStore, PointCloud, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
/// Step for multi-layer blocks, where the O(h²) truncation error of a
/// 1e-3 step alone reaches 1e-3 relative.
pub const BLOCK_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient
/// is near zero are compared on an absolute scale.
pub const FLOOR: f64 = 1e-4;
pub const INSTANCES: usize = 20;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub step: f64,
    pub instances: usize,
    pub worst: GradCheck,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.worst.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Uniform in [-2, 2] but at least `gap` away from zero (kinks).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `Σ w ⊙ y` with a fixed random `w`, reducing any output to a scalar.
fn project(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone().reshape(g.shape(y))?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(1..=4),
        rng.random_range(2..=5),
        rng.random_range(1..=4),
    )
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn run(name: &'static str, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Case) -> SuiteResult {
    run_with_step(name, seed, STEP, make)
}

fn run_with_step(
    name: &'static str,
    seed: u64,
    h: f64,
    make: impl Fn(&mut ChaCha8Rng) -> Case,
) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Option<GradCheck> = None;
    for _ in 0..INSTANCES {
        let (inputs, f) = make(&mut rng);
        let r = check_gradients(&inputs, h, FLOOR, |g, v| f(g, v))
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        if worst.is_none_or(|w| r.max_rel_error > w.max_rel_error) {
            worst = Some(r);
        }
    }
    SuiteResult {
        name,
        step: h,
        instances: INSTANCES,
        worst: worst.expect("instances"),
    }
}

macro_rules! unary {
    ($name:expr, $seed:expr, $gap:expr, |$g:ident, $x:ident| $body:expr) => {
        run($name, $seed, |rng| {
            let (m, k, _) = dims(rng);
            let x = if $gap > 0.0 {
                away_from_zero(rng, &[m, k], $gap)
            } else {
                uniform(rng, &[m, k])
            };
            let w = uniform(rng, &[m * k]);
            (
                vec![x],
                Box::new(move |$g: &mut Graph<f64>, v: &[Var]| {
                    let $x = v[0];
                    let y = $body;
                    project($g, y, &w)
                }),
            )
        })
    };
}

macro_rules! binary {
    ($name:expr, $seed:expr, $method:ident) => {
        run($name, $seed, |rng| {
            let (m, k, _) = dims(rng);
            let (a, b, w) = (uniform(rng, &[m, k]), uniform(rng, &[m, k]), uniform(rng, &[m * k]));
            (
                vec![a, b],
                Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                    let y = g.$method(v[0], v[1])?;
                    project(g, y, &w)
                }),
            )
        })
    };
}

pub fn primitive_ops() -> Vec<SuiteResult> {
    let mut out = vec![
        run("matmul", 1, |rng| {
            let (m, k, n) = dims(rng);
            let (a, b, w) = (uniform(rng, &[m, k]), uniform(rng, &[k, n]), uniform(rng, &[m * n]));
            (
                vec![a, b],
                Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    project(g, y, &w)
                }),
            )
        }),
        unary!("transpose", 2, 0.0, |g, x| g.transpose(x)?),
        binary!("add", 3, add),
        binary!("sub", 4, sub),
        binary!("mul", 5, mul),
    ];
    for (name, seed, gain) in [("add_row", 6u64, false), ("mul_row", 7, true)] {
        out.push(run(name, seed, move |rng| {
            let (m, k, _) = dims(rng);
            let (x, r, w) = (uniform(rng, &[m, k]), uniform(rng, &[k]), uniform(rng, &[m * k]));
            (
                vec![x, r],
                Box::new(move |g, v| {
                    let y = if gain { g.mul_row(v[0], v[1])? } else { g.add_row(v[0], v[1])? };
                    project(g, y, &w)
                }),
            )
        }));
    }
    out.push(run("scale", 8, |rng| {
        let (m, k, _) = dims(rng);
        let s: f32 = rng.random_range(-2.0..2.0);
        let (x, w) = (uniform(rng, &[m, k]), uniform(rng, &[m * k]));
        (
            vec![x],
            Box::new(move |g, v| {
                let y = g.scale(v[0], s);
                project(g, y, &w)
            }),
        )
    }));
    out.push(unary!("relu", 9, 0.01, |g, x| g.relu(x)));
    out.push(unary!("sigmoid", 10, 0.0, |g, x| g.sigmoid(x)));
    out.push(unary!("softmax", 11, 0.0, |g, x| g.softmax(x)));
    out.push(unary!("log_softmax", 12, 0.0, |g, x| g.log_softmax(x)));
    out.push(unary!("layer_norm", 13, 0.0, |g, x| g.layer_norm(x, 1e-5)));
    out.push(run("gather_rows", 14, |rng| {
        let (m, k, _) = dims(rng);
        let rows = rng.random_range(1..=6);
        let index: Vec<usize> = (0..rows).map(|_| rng.random_range(0..m)).collect();
        let (x, w) = (uniform(rng, &[m, k]), uniform(rng, &[rows * k]));
        (
            vec![x],
            Box::new(move |g, v| {
                let y = g.gather_rows(v[0], &index)?;
                project(g, y, &w)
            }),
        )
    }));
    out.push(run("gather_slots", 15, |rng| {
        let (m, k, _) = dims(rng);
        let (per_row, rows) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let slots: Vec<Option<usize>> = (0..per_row * rows)
            .map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..m)))
            .collect();
        let (x, w) = (uniform(rng, &[m, k]), uniform(rng, &[rows * per_row * k]));
        (
            vec![x],
            Box::new(move |g, v| {
                let y = g.gather_slots(v[0], &slots, per_row)?;
                project(g, y, &w)
            }),
        )
    }));
    for (name, seed, mean) in [("scatter_add_rows", 16u64, false), ("scatter_mean_rows", 17, true)] {
        out.push(run(name, seed, move |rng| {
            let (m, k, _) = dims(rng);
            let out_rows = rng.random_range(1..=3);
            let index: Vec<usize> = (0..m).map(|_| rng.random_range(0..out_rows)).collect();
            let (x, w) = (uniform(rng, &[m, k]), uniform(rng, &[out_rows * k]));
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = if mean {
                        g.scatter_mean_rows(v[0], &index, out_rows)?
                    } else {
                        g.scatter_add_rows(v[0], &index, out_rows)?
                    };
                    project(g, y, &w)
                }),
            )
        }));
    }
    out.push(run("concat_cols", 18, |rng| {
        let (m, k, n) = dims(rng);
        let (a, b, w) = (uniform(rng, &[m, k]), uniform(rng, &[m, n]), uniform(rng, &[m * (k + n)]));
        (
            vec![a, b],
            Box::new(move |g, v| {
                let y = g.concat_cols(&[v[0], v[1], v[0]])?;
                let y = g.slice_cols(y, 0, k + n)?;
                project(g, y, &w)
            }),
        )
    }));
    out.push(run("slice_cols", 19, |rng| {
        let (m, k, _) = dims(rng);
        let start = rng.random_range(0..k);
        let width = rng.random_range(1..=k - start);
        let (x, w) = (uniform(rng, &[m, k]), uniform(rng, &[m * width]));
        (
            vec![x],
            Box::new(move |g, v| {
                let y = g.slice_cols(v[0], start, width)?;
                project(g, y, &w)
            }),
        )
    }));
    for (name, seed, mean) in [("sum", 20u64, false), ("mean", 21, true)] {
        out.push(run(name, seed, move |rng| {
            let (m, k, _) = dims(rng);
            let (x, w) = (uniform(rng, &[m, k]), uniform(rng, &[m * k]));
            (
                vec![x],
                Box::new(move |g, v| {
                    // Squared so the upstream gradient is not constant.
                    let s = if mean { g.mean(v[0]) } else { g.sum(v[0]) };
                    let sq = g.mul(s, s)?;
                    let lin = project(g, v[0], &w)?;
                    g.add(sq, lin)
                }),
            )
        }));
    }
    out.push(run("nll", 22, |rng| {
        let (m, k, _) = dims(rng);
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let weights: Vec<f32> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let x = uniform(rng, &[m, k]);
        (
            vec![x],
            Box::new(move |g, v| {
                let lp = g.log_softmax(v[0]);
                g.nll(lp, &targets, &weights)
            }),
        )
    }));
    for (name, seed, gamma) in [("focal_rows", 23u64, 2.0f32), ("focal_rows_gamma_1.5", 24, 1.5)] {
        out.push(run(name, seed, move |rng| {
            let (m, k, _) = dims(rng);
            let targets: Vec<f32> = (0..m * k).map(|_| rng.random_bool(0.4) as u8 as f32).collect();
            let (x, w) = (uniform(rng, &[m, k]), uniform(rng, &[m]));
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = g.focal_rows(v[0], &targets, 0.25, gamma)?;
                    project(g, y, &w)
                }),
            )
        }));
    }
    out.push(run("dice_rows", 25, |rng| {
        let (m, k, _) = dims(rng);
        let targets: Vec<f32> = (0..m * k).map(|_| rng.random_bool(0.4) as u8 as f32).collect();
        let (x, w) = (uniform(rng, &[m, k]), uniform(rng, &[m]));
        (
            vec![x],
            Box::new(move |g, v| {
                let y = g.dice_rows(v[0], &targets)?;
                project(g, y, &w)
            }),
        )
    }));
    out
}

/// A random labeled instance for the set-prediction loss: `(class logits,
/// mask logits, labels)` with `k` predictions over `n` points.
fn loss_instance(rng: &mut ChaCha8Rng, classes: usize, k: usize, n: usize) -> (Tensor<f64>, Tensor<f64>, Vec<u16>) {
    let labels: Vec<u16> = (0..n)
        .map(|_| if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=classes as u16) })
        .collect();
    (uniform(rng, &[k, classes + 1]), uniform(rng, &[k, n]), labels)
}

pub fn composed_losses() -> Vec<SuiteResult> {
    let cfg = LossConfig {
        no_object_weight: 0.1,
        ..LossConfig::default()
    };
    let napl = run("napl_loss", 30, move |rng| {
        let (classes, n) = (rng.random_range(2..=4), rng.random_range(4..=12));
        let total = rng.random_range(classes + 1..=classes + 4);
        let dropped = rng.random_range(0..=1);
        let (class_logits, mask_logits, labels) = loss_instance(rng, classes, total, n);
        let mut kept: Vec<usize> = (0..total).collect();
        for _ in 0..dropped {
            kept.remove(rng.random_range(0..kept.len()));
        }
        let gt = pad_ground_truth(build_ground_truth_pairs(&labels), kept.len()).unwrap();
        // Matching on the instance itself, as in training.
        let pick = |t: &Tensor<f64>| {
            let c = t.cols();
            let data = kept.iter().flat_map(|&q| t.row(q).iter().map(|&v| v as f32)).collect();
            Tensor::matrix(kept.len(), c, data).unwrap()
        };
        let logits32 = pick(&class_logits);
        let mut g: Graph = Graph::new();
        let s = g.constant(logits32);
        let s = g.softmax(s);
        let cost = matching_cost(g.value(s), &pick(&mask_logits), &gt, &cfg).unwrap();
        let sigma = hungarian_match(&cost).unwrap();
        (
            vec![class_logits, mask_logits],
            Box::new(move |g, v| Ok(napl_loss(g, v[0], v[1], &kept, &gt, &sigma, &cfg)?.total)),
        )
    });
    let pwc = run("pwc_loss", 31, |rng| {
        let (classes, n) = (rng.random_range(2..=5), rng.random_range(3..=10));
        let labels: Vec<u16> = (0..n)
            .map(|i| if i > 0 && rng.random_bool(0.2) { 0 } else { rng.random_range(1..=classes as u16) })
            .collect();
        let x = uniform(rng, &[n, classes]);
        (
            vec![x],
            Box::new(move |g, v| napl_core::encoder::pwc_loss_graph(g, v[0], &labels)),
        )
    });
    vec![napl, pwc]
}

/// Inputs: every parameter of `store` in order; the closure sees them as a
/// [`Bound`].
fn params_case(
    store: &ParamStore,
    f: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var> + 'static,
) -> Case {
    let inputs: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.value.cast()).collect();
    (
        inputs,
        Box::new(move |g, v| f(g, &Bound::from_vars(v.to_vec()))),
    )
}

pub fn network_blocks() -> Vec<SuiteResult> {
    let attention = run_with_step("attention_block", 40, BLOCK_STEP, |rng| {
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut store, "attn", 8, 2, rng);
        let q = store.add("q", Tensor::randn(&[3, 8], 1.0, rng), napl_core::ParamGroup::Head);
        let kv = store.add("kv", Tensor::randn(&[4, 8], 1.0, rng), napl_core::ParamGroup::Head);
        let w = uniform(rng, &[3 * 8]);
        params_case(&store, move |g, p| {
            let y = attention_block(g, p, &attn, p.var(q), p.var(kv), p.var(kv))?;
            project(g, y, &w)
        })
    });
    let decoder = run_with_step("decoder_layer", 41, BLOCK_STEP, |rng| {
        let cfg = DecoderConfig {
            num_queries: 3,
            layers: 1,
            heads: 2,
            query_dim: 8,
            input_dim: 6,
            feature_dim: 4,
            num_classes: 2,
            position_scale: 1.0,
        };
        let mut store = ParamStore::new();
        let queries = QuerySet::new(&mut store, cfg.num_queries, cfg.query_dim, rng);
        let dec = DecoderParams::new(&mut store, &cfg, rng).unwrap();
        let deep = store.add("deep", Tensor::randn(&[5, 6], 1.0, rng), napl_core::ParamGroup::Head);
        let centers: Vec<[f32; 3]> = (0..5)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let (w1, w2) = (uniform(rng, &[3 * 3]), uniform(rng, &[3 * 4]));
        params_case(&store, move |g, p| {
            let out = dec.decode_prototypes(g, p, &queries, p.var(deep), &centers)?;
            let a = project(g, out.scores, &w1)?;
            let b = project(g, out.prototypes, &w2)?;
            g.add(a, b)
        })
    });
    let encoder = run_with_step("extract_features", 42, BLOCK_STEP, |rng| {
        let cfg = EncoderConfig {
            voxel_size: 0.25,
            widths: vec![8, 8],
            feature_dim: 4,
        };
        let coords: Vec<[f32; 3]> = (0..10)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.5)])
            .collect();
        let intensity: Vec<f32> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let pc = PointCloud::new(coords, Some(intensity), None).unwrap();
        let scene = PreparedScene::new(&pc, &cfg).unwrap();
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, &cfg, rng).unwrap();
        let (w1, w2) = (uniform(rng, &[10 * 4]), uniform(rng, &[1]));
        params_case(&store, move |g, p| {
            let out = enc.extract_features(g, p, &scene)?;
            let a = project(g, out.features, &w1)?;
            let deep = g.sum(out.deep);
            let b = project(g, deep, &w2)?;
            g.add(a, b)
        })
    });
    vec![attention, decoder, encoder]
}
