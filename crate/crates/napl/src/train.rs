//! Training, evaluation and prototype statistics.
//!
//! Every random choice (epoch order, augmentation, prototype dropout) is
//! drawn from a generator seeded by `(run seed, epoch, scene index)`, and
//! per-scene gradients are summed in batch order, so results do not depend
//! on the number of worker threads.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use napl_core::inference::{
    accumulate_confusion, classes_present, count_prototypes, miou, ConfusionMatrix, MiouReport,
    PrototypeStats,
};
use napl_core::model::{Gradients, NaplStep};
use napl_core::synthetic::scene_seed;
use napl_core::{
    adamw_step, NaplModel, OptimizerState, ParamGroup, ParamStore, PolyLr, PreparedScene,
    PwcModel,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{self, ModelKind, Sidecar};
use crate::config::{AblationFlags, RunConfig};
use crate::dataset::{Dataset, Split};
use crate::error::{NaplError, Result};

/// Caps worker threads; defaults to all available cores.
pub const THREADS_ENV: &str = "NAPL_THREADS";

const ORDER_TAG: u64 = 0x6f72_6465_72;
const SCENE_TAG: u64 = 0x7363_656e_65;

fn pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| NaplError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| NaplError::Config(format!("thread pool: {e}")))
}

/// JSON-lines log writer.
pub struct JsonLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| NaplError::io(path, e))?;
        Ok(JsonLog {
            out: BufWriter::new(file),
            path: path.to_owned(),
        })
    }

    pub fn write(&mut self, value: &Value) -> Result<()> {
        writeln!(self.out, "{value}").map_err(|e| NaplError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| NaplError::io(&self.path, e))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NaplError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| NaplError::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| NaplError::io(path, e))
}

fn scene_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let stream = scene_seed(seed ^ SCENE_TAG, epoch as u64);
    ChaCha8Rng::seed_from_u64(scene_seed(stream, index as u64))
}

fn prepare_train(cfg: &RunConfig, data: &Dataset, index: usize, rng: &mut ChaCha8Rng) -> Result<PreparedScene> {
    let pc = cfg.augmentation().apply(&data.load(index)?, rng);
    Ok(PreparedScene::new(&pc, &cfg.encoder())?)
}

fn prepare_eval(cfg: &RunConfig, data: &Dataset, index: usize) -> Result<PreparedScene> {
    Ok(PreparedScene::new(&data.load(index)?, &cfg.encoder())?)
}

/// Either model behind one interface.
pub enum Model {
    Pwc(PwcModel),
    Napl(NaplModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Pwc(_) => ModelKind::Pwc,
            Model::Napl(_) => ModelKind::Napl,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Pwc(m) => m.store(),
            Model::Napl(m) => m.store(),
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Pwc(m) => m.store_mut(),
            Model::Napl(m) => m.store_mut(),
        }
    }

    /// A freshly initialized model of `kind` shaped by `cfg`.
    pub fn build(kind: ModelKind, cfg: &RunConfig, num_classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(match kind {
            ModelKind::Pwc => Model::Pwc(PwcModel::new(&cfg.encoder(), num_classes, &mut rng)?),
            ModelKind::Napl => Model::Napl(NaplModel::new(&cfg.napl(num_classes), &mut rng)?),
        })
    }

    /// Builds a model from `cfg` and loads the checkpoint tensors into it.
    pub fn load(path: &Path, cfg: &RunConfig, num_classes: usize) -> Result<(Self, Sidecar)> {
        let (tensors, sidecar) = checkpoint::load(path)?;
        let mut model = Model::build(sidecar.kind, cfg, num_classes)?;
        checkpoint::apply(model.store_mut(), &tensors)?;
        Ok((model, sidecar))
    }
}

/// Metrics of one split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub kind: ModelKind,
    pub split: Split,
    pub frames: usize,
    pub miou: f64,
    pub per_class: Vec<ClassMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: u16,
    pub name: String,
    pub iou: Option<f64>,
    /// Average active prototypes over frames containing the class.
    pub avg_prototypes: Option<f64>,
    pub frames_present: u64,
}

/// Per-frame evaluation record for the CSV export.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub points: usize,
    pub miou: Option<f64>,
    pub retained_prototypes: Option<usize>,
    pub counts: Option<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    pub stats: Option<PrototypeStats>,
    pub report: MiouReport,
    pub frames: Vec<FrameRecord>,
}

struct FrameEval {
    confusion: ConfusionMatrix,
    counts: Option<Vec<u32>>,
    present: Vec<bool>,
    record: FrameRecord,
}

fn eval_frame(model: &Model, cfg: &RunConfig, data: &Dataset, index: usize) -> Result<FrameEval> {
    let scene = prepare_eval(cfg, data, index)?;
    let labels = scene
        .labels
        .clone()
        .ok_or_else(|| NaplError::Data(format!("frame {index} has no labels")))?;
    let c = data.num_classes();
    let (pred, counts, retained) = match model {
        Model::Pwc(m) => (m.predict(&scene)?, None, None),
        Model::Napl(m) => {
            let out = m.forward(&scene)?;
            let seg = napl_core::inference::semantic_inference(&out.features, &out.prototypes)?;
            let counts = count_prototypes(&out.prototypes, &out.features)?;
            (seg.labels, Some(counts), Some(out.prototypes.retained_count()))
        }
    };
    let mut confusion = ConfusionMatrix::new(c);
    accumulate_confusion(&pred, &labels, &mut confusion)?;
    let frame_miou = miou(&confusion).ok().map(|r| r.mean);
    Ok(FrameEval {
        present: classes_present(&labels, c),
        record: FrameRecord {
            frame: index,
            points: labels.len(),
            miou: frame_miou,
            retained_prototypes: retained,
            counts: counts.clone(),
        },
        confusion,
        counts,
    })
}

/// Runs inference over every frame of `data`; frames are processed in
/// parallel and merged in index order.
pub fn evaluate_model(model: &Model, cfg: &RunConfig, data: &Dataset, split: Split) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(NaplError::Data(format!("the {} split is empty", split.name())));
    }
    let c = data.num_classes();
    let frames: Vec<FrameEval> = (0..data.len())
        .into_par_iter()
        .map(|i| eval_frame(model, cfg, data, i))
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::new(c);
    let mut stats = matches!(model, Model::Napl(_)).then(|| PrototypeStats::new(c));
    let mut records = Vec::with_capacity(frames.len());
    for f in frames {
        confusion.merge(&f.confusion)?;
        if let (Some(s), Some(counts)) = (stats.as_mut(), f.counts.as_ref()) {
            s.record(counts, &f.present)?;
        }
        records.push(f.record);
    }
    let report = miou(&confusion)?;
    let averages = stats.as_ref().map(|s| s.averages());
    let per_class = (0..c)
        .map(|j| ClassMetrics {
            class: j as u16 + 1,
            name: data.class_names()[j].clone(),
            iou: report.per_class[j],
            avg_prototypes: averages.as_ref().and_then(|a| a[j]),
            frames_present: stats.as_ref().map_or(0, |s| s.frames_present()[j]),
        })
        .collect();
    Ok(Evaluation {
        metrics: Metrics {
            kind: model.kind(),
            split,
            frames: data.len(),
            miou: report.mean,
            per_class,
        },
        confusion,
        stats,
        report,
        frames: records,
    })
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    /// Validation metrics of the best epoch.
    pub metrics: Metrics,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

/// Directory name of a run with the given flags.
pub fn run_name(flags: AblationFlags) -> &'static str {
    match (
        flags.use_transformer,
        flags.use_pretrained_backbone,
        flags.use_prototype_dropout,
    ) {
        (false, _, _) => "pwc",
        (true, false, false) => "napl-B",
        (true, true, false) => "napl-C",
        (true, true, true) => "napl-full",
        (true, false, true) => "napl-pd",
    }
}

/// Trains the point-wise classifier on the configured dataset; the result
/// is the baseline and the backbone initialization for prototype training.
pub fn train_pwc(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let train = Dataset::open(cfg, Split::Train)?;
    let val = Dataset::open(cfg, Split::Val)?;
    let model = Model::build(ModelKind::Pwc, cfg, train.num_classes())?;
    fit(cfg, model, &train, &val, &cfg.out_dir.join("pwc"))
}

/// Trains the prototype model. With `use_pretrained_backbone`, `init` must
/// name a point-wise checkpoint whose encoder initializes the backbone; its
/// classifier is discarded.
pub fn train_napl(cfg: &RunConfig, init: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let train = Dataset::open(cfg, Split::Train)?;
    let val = Dataset::open(cfg, Split::Val)?;
    let dir = cfg.out_dir.join(run_name(cfg.ablation));
    train_napl_on(cfg, init, &train, &val, &dir)
}

/// [`train_napl`] over explicit datasets and output directory.
pub fn train_napl_on(
    cfg: &RunConfig,
    init: Option<&Path>,
    train: &Dataset,
    val: &Dataset,
    dir: &Path,
) -> Result<RunOutput> {
    cfg.validate()?;
    let flags = cfg.ablation;
    if !flags.use_transformer {
        return Err(NaplError::Config(
            "prototype training needs use_transformer; ablation A is train-pwc".into(),
        ));
    }
    let mut model = NaplModel::new(&cfg.napl(train.num_classes()), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    match (flags.use_pretrained_backbone, init) {
        (true, Some(path)) => {
            let (pwc, sidecar) = Model::load(path, cfg, train.num_classes())?;
            if sidecar.kind != ModelKind::Pwc {
                return Err(NaplError::Config(format!(
                    "{} is not a point-wise checkpoint",
                    path.display()
                )));
            }
            let copied = model.load_backbone(pwc.store())?;
            log::info!("initialized {copied} encoder tensors from {}", path.display());
        }
        (true, None) => {
            return Err(NaplError::Config(
                "use_pretrained_backbone needs a point-wise checkpoint (--init)".into(),
            ))
        }
        (false, Some(_)) => {
            return Err(NaplError::Config(
                "an init checkpoint was given but use_pretrained_backbone is off".into(),
            ))
        }
        (false, None) => {}
    }
    fit(cfg, Model::Napl(model), train, val, dir)
}

/// [`train_pwc`] over explicit datasets and output directory.
pub fn train_pwc_on(cfg: &RunConfig, train: &Dataset, val: &Dataset, dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let model = Model::build(ModelKind::Pwc, cfg, train.num_classes())?;
    fit(cfg, model, train, val, dir)
}

struct SceneResult {
    grads: Gradients,
    step: Option<NaplStep>,
}

fn learning_rates(model: &Model, cfg: &RunConfig, sched: &[PolyLr; 2], step: u64) -> Vec<f32> {
    let t = &cfg.train;
    model
        .store()
        .entries()
        .iter()
        .map(|e| match model {
            Model::Pwc(_) => sched[0].lr(step),
            Model::Napl(_) => match e.group {
                ParamGroup::Backbone => sched[0].lr(step),
                ParamGroup::Head => sched[1].lr(step),
            },
        })
        .map(|lr| if lr > 0.0 { lr } else { t.head_lr.min(t.backbone_lr) })
        .collect()
}

fn fit(cfg: &RunConfig, mut model: Model, train: &Dataset, val: &Dataset, dir: &Path) -> Result<RunOutput> {
    if train.is_empty() {
        return Err(NaplError::Data("the training split is empty".into()));
    }
    create_dir(dir)?;
    let pool = pool()?;
    let mut log = JsonLog::create(&dir.join(LOG_FILE))?;
    let t = &cfg.train;
    let batches_per_epoch = train.len().div_ceil(t.batch_size);
    let total = (batches_per_epoch * t.epochs) as u64;
    let power = t.lr_power;
    let sched = match model {
        Model::Pwc(_) => {
            let s = PolyLr::new(t.pwc_lr, total, power)?;
            [s, s]
        }
        Model::Napl(_) => [PolyLr::new(t.backbone_lr, total, power)?, PolyLr::new(t.head_lr, total, power)?],
    };
    let adamw = cfg.adamw();
    let loss_cfg = cfg.loss();
    let dropout = if cfg.ablation.use_prototype_dropout {
        t.dropout_count
    } else {
        0
    };
    let params: Vec<_> = model.store().entries().iter().map(|e| e.value.clone()).collect();
    let mut state = OptimizerState::new(&params);
    drop(params);

    log.write(&json!({
        "event": "start",
        "kind": model.kind(),
        "train_frames": train.len(),
        "val_frames": val.len(),
        "parameters": model.store().numel(),
        "steps": total,
        "dropout_count": dropout,
    }))?;

    let mut best: Option<(usize, Metrics)> = None;
    let mut epoch_losses = Vec::with_capacity(t.epochs);
    let mut step = 0u64;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    for epoch in 0..t.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed ^ ORDER_TAG, epoch as u64)));
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(t.batch_size) {
            let results: Vec<SceneResult> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut rng = scene_rng(cfg.seed, epoch, i);
                        let scene = prepare_train(cfg, train, i, &mut rng)?;
                        Ok(match &model {
                            Model::Pwc(m) => SceneResult {
                                grads: m.gradients(&scene)?,
                                step: None,
                            },
                            Model::Napl(m) => {
                                let (grads, s) = m.gradients(&scene, dropout, &loss_cfg, &mut rng)?;
                                SceneResult {
                                    grads,
                                    step: Some(s),
                                }
                            }
                        })
                    })
                    .collect::<Result<_>>()
            })?;
            let n = results.len() as f32;
            let mut grads = results[0].grads.grads.clone();
            for r in &results[1..] {
                for (acc, g) in grads.iter_mut().zip(&r.grads.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            grads.iter_mut().flatten().for_each(|v| *v /= n);
            let loss = results.iter().map(|r| r.grads.loss).sum::<f64>() / n as f64;
            epoch_loss += loss;
            let lrs = learning_rates(&model, cfg, &sched, step);
            let mut values: Vec<_> = model.store().entries().iter().map(|e| e.value.clone()).collect();
            let mut line = json!({
                "event": "step",
                "epoch": epoch,
                "step": step,
                "loss": loss,
                "lr_backbone": sched[0].lr(step),
                "lr_head": sched[1].lr(step),
            });
            if let Some(steps) = results.iter().map(|r| r.step.as_ref()).collect::<Option<Vec<_>>>() {
                line["cross_entropy"] = json!(steps.iter().map(|s| s.cross_entropy).sum::<f64>() / n as f64);
                line["focal"] = json!(steps.iter().map(|s| s.focal).sum::<f64>() / n as f64);
                line["dice"] = json!(steps.iter().map(|s| s.dice).sum::<f64>() / n as f64);
                line["matched"] = json!(steps.iter().map(|s| s.matched.clone()).collect::<Vec<_>>());
                line["dropout"] = json!(steps.iter().any(|s| s.dropout_invoked));
            }
            match adamw_step(&mut values, &grads, &mut state, &lrs, &adamw) {
                Ok(()) => {
                    for (e, v) in model.store_mut().entries_mut().iter_mut().zip(values) {
                        e.value = v;
                    }
                }
                Err(err) => {
                    log::warn!("step {step}: {err}");
                    line["rejected"] = json!(err.to_string());
                }
            }
            log.write(&line)?;
            step += 1;
        }
        let mean_loss = epoch_loss / batches_per_epoch as f64;
        epoch_losses.push(mean_loss);
        let eval = pool.install(|| evaluate_model(&model, cfg, val, Split::Val))?;
        let improved = best.as_ref().is_none_or(|(_, m)| eval.metrics.miou > m.miou);
        log.write(&json!({
            "event": "epoch",
            "epoch": epoch,
            "train_loss": mean_loss,
            "val_miou": eval.metrics.miou,
            "per_class_iou": eval.report.per_class,
            "avg_prototypes": eval.metrics.per_class.iter().map(|c| c.avg_prototypes).collect::<Vec<_>>(),
            "best": improved,
        }))?;
        log::info!(
            "epoch {epoch}: train loss {mean_loss:.4}, val mIoU {:.4}",
            eval.metrics.miou
        );
        if improved {
            let sidecar = Sidecar {
                kind: model.kind(),
                step,
                epoch,
                val_miou: Some(eval.metrics.miou),
                config: cfg.clone(),
            };
            checkpoint::save(&checkpoint, model.store(), &sidecar)?;
            best = Some((epoch, eval.metrics));
        }
        log.flush()?;
    }
    let (best_epoch, metrics) = best.expect("at least one epoch");
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    log.write(&json!({"event": "end", "best_epoch": best_epoch, "best_val_miou": metrics.miou}))?;
    log.flush()?;
    Ok(RunOutput {
        dir: dir.to_owned(),
        checkpoint,
        best_epoch,
        best_val_miou: metrics.miou,
        metrics,
        epoch_losses,
    })
}

/// Evaluates a checkpoint on `split`, writing `metrics.json` and
/// `frames.csv` into `out`. The model is shaped by `cfg`, so a checkpoint
/// from a differently shaped model fails naming the first mismatched tensor.
pub fn evaluate(checkpoint_path: &Path, cfg: &RunConfig, split: Split, out: &Path) -> Result<Metrics> {
    cfg.validate()?;
    let data = Dataset::open(cfg, split)?;
    let (model, _) = Model::load(checkpoint_path, cfg, data.num_classes())?;
    let eval = pool()?.install(|| evaluate_model(&model, cfg, &data, split))?;
    create_dir(out)?;
    write_json(&out.join(METRICS_FILE), &eval.metrics)?;
    let mut csv = String::from("frame,points,miou,retained_prototypes\n");
    for f in &eval.frames {
        let opt = |v: Option<String>| v.unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            f.frame,
            f.points,
            opt(f.miou.map(|v| v.to_string())),
            opt(f.retained_prototypes.map(|v| v.to_string()))
        ));
    }
    let path = out.join("frames.csv");
    fs::write(&path, csv).map_err(|e| NaplError::io(&path, e))?;
    Ok(eval.metrics)
}

/// Per-class average prototype counts of a prototype checkpoint on `split`,
/// written as `prototype_counts.csv` and `prototype_counts.json`.
pub fn export_stats(checkpoint_path: &Path, cfg: &RunConfig, split: Split, out: &Path) -> Result<Vec<ClassMetrics>> {
    cfg.validate()?;
    let data = Dataset::open(cfg, split)?;
    if data.is_empty() {
        return Err(NaplError::Data(format!("the {} split is empty", split.name())));
    }
    let (model, _) = Model::load(checkpoint_path, cfg, data.num_classes())?;
    if model.kind() != ModelKind::Napl {
        return Err(NaplError::Config(format!(
            "{} is a point-wise checkpoint; prototype statistics need a prototype model",
            checkpoint_path.display()
        )));
    }
    let eval = pool()?.install(|| evaluate_model(&model, cfg, &data, split))?;
    create_dir(out)?;
    let mut csv = String::from("class,name,avg_prototypes,frames_present\n");
    for c in &eval.metrics.per_class {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            c.class,
            c.name,
            c.avg_prototypes.map(|v| v.to_string()).unwrap_or_default(),
            c.frames_present
        ));
    }
    let path = out.join("prototype_counts.csv");
    fs::write(&path, csv).map_err(|e| NaplError::io(&path, e))?;
    write_json(&out.join("prototype_counts.json"), &eval.metrics.per_class)?;
    Ok(eval.metrics.per_class)
}
