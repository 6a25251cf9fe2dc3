use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use napl::dataset::MANIFEST_FILE;
use napl::train::CHECKPOINT_FILE;
use napl::{Ablation, DatasetKind, NaplError, RunConfig, Split, SyntheticManifest};

#[derive(Parser)]
#[command(name = "napl", version, about = "Prototype-based point-cloud semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take the synthetic profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_root: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, NaplError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::synthetic(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(a) = self.ablation {
            cfg.ablation = a.flags();
        }
        if let Some(d) = self.dataset {
            cfg.dataset = d;
        }
        if let Some(root) = &self.data_root {
            cfg.data_root = Some(root.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the point-wise classifier (baseline and backbone pretraining).
    TrainPwc(Common),
    /// Train the prototype model; `--ablation A` runs train-pwc.
    TrainNapl {
        #[command(flatten)]
        common: Common,
        /// Point-wise checkpoint for the backbone; defaults to
        /// `<out_dir>/pwc/best.ckpt`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes metrics.json and frames.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Export per-class average prototype counts of a prototype checkpoint.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Write the synthetic scene manifest into `--data-root` (or `--out-dir`).
    GenData(Common),
}

fn run(cli: Cli) -> Result<(), NaplError> {
    match cli.command {
        Command::TrainPwc(common) => {
            let out = napl::train_pwc(&common.config()?)?;
            println!("{}: best val mIoU {:.4} at epoch {}", out.checkpoint.display(), out.best_val_miou, out.best_epoch);
        }
        Command::TrainNapl { common, init } => {
            let cfg = common.config()?;
            let out = if !cfg.ablation.use_transformer {
                napl::train_pwc(&cfg)?
            } else {
                let init = match (cfg.ablation.use_pretrained_backbone, init) {
                    (true, None) => Some(cfg.out_dir.join("pwc").join(CHECKPOINT_FILE)),
                    (_, init) => init,
                };
                if let Some(path) = init.as_ref().filter(|p| !p.exists()) {
                    return Err(NaplError::Config(format!(
                        "backbone checkpoint {} not found; run train-pwc first or pass --init",
                        path.display()
                    )));
                }
                napl::train_napl(&cfg, init.as_deref())?
            };
            println!("{}: best val mIoU {:.4} at epoch {}", out.checkpoint.display(), out.best_val_miou, out.best_epoch);
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = common.config()?;
            let out = cfg.out_dir.join(format!("eval-{}", split.name()));
            let m = napl::evaluate(&checkpoint, &cfg, split, &out)?;
            println!("{} mIoU {:.4} over {} frames", split.name(), m.miou, m.frames);
            for c in &m.per_class {
                let iou = c.iou.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("  {:>3} {:<16} {iou}", c.class, c.name);
            }
        }
        Command::Stats { common, checkpoint, split } => {
            let cfg = common.config()?;
            let out = cfg.out_dir.join(format!("stats-{}", split.name()));
            for c in napl::export_stats(&checkpoint, &cfg, split, &out)? {
                let avg = c.avg_prototypes.map_or("-".to_string(), |v| format!("{v:.3}"));
                println!("  {:>3} {:<16} {avg}", c.class, c.name);
            }
        }
        Command::GenData(common) => {
            let cfg = common.config()?;
            if cfg.dataset != DatasetKind::Synthetic {
                return Err(NaplError::Config("gen-data only applies to the synthetic dataset".into()));
            }
            let dir = cfg.data_root.clone().unwrap_or_else(|| cfg.out_dir.clone());
            std::fs::create_dir_all(&dir).map_err(|e| NaplError::Io { path: dir.clone(), source: e })?;
            let s = &cfg.synthetic;
            let manifest = SyntheticManifest::new(s.dataset_seed, s.train_scenes, s.val_scenes);
            let path = dir.join(MANIFEST_FILE);
            manifest.write(&path)?;
            println!("{}: {} train, {} val scenes", path.display(), manifest.train.len(), manifest.val.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
