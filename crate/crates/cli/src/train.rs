use std::path::{Path, PathBuf};

use clap::Args;
use compose_probe_align::config::{CLIP_B32_PATCHES, CLIP_B32_TEXT_DIM, CLIP_B32_TOKENS, CLIP_B32_VISUAL_DIM};
use compose_probe_align::{
    config_param_count, history_csv, pairs_from_instances, save_checkpoint, synthetic_pairs, train, PairItem, Params,
    TrainConfig, TransformerConfig, TransformerScorer, Variant,
};
use compose_probe_core::eval::{evaluate, read_dataset, EvalOptions};
use serde::Serialize;

use crate::exit::{Failure, Outcome, OrExit, DATA, RUNTIME};
use crate::manifest::{manifest_path, RunManifest};
use crate::source::{Encoder, EncoderArgs};

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "local")]
    pub variant: Variant,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 512)]
    pub model_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 2048)]
    pub ff_dim: usize,
    /// Width of the visual inputs (taken from the data when training on a dataset).
    #[arg(long, default_value_t = CLIP_B32_VISUAL_DIM)]
    pub visual_dim: usize,
    /// Width of the text inputs (taken from the data when training on a dataset).
    #[arg(long, default_value_t = CLIP_B32_TEXT_DIM)]
    pub text_dim: usize,
    #[arg(long, default_value_t = CLIP_B32_PATCHES)]
    pub max_patches: usize,
    #[arg(long, default_value_t = CLIP_B32_TOKENS)]
    pub max_tokens: usize,
}

impl ModelArgs {
    pub fn config(&self, layers: usize) -> TransformerConfig {
        let base = match self.variant {
            Variant::Local => TransformerConfig::local(self.visual_dim, self.text_dim, self.max_patches, self.max_tokens),
            Variant::Global => TransformerConfig::global(self.visual_dim, self.text_dim),
        };
        base.with_shape(layers, self.model_dim, self.heads, self.ff_dim)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Training instances (evaluator JSONL); embeddings come from --encoder.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Validation instances; defaults to the training instances.
    #[arg(long, requires = "data")]
    pub val: Option<PathBuf>,
    /// Train on this many generated, separable pairs (validated on themselves).
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Add each instance's negative pair to its batch.
    #[arg(long)]
    pub hard_negatives: bool,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub warmup: f64,
    /// Positive pairs per batch.
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Validate every this many steps instead of once per epoch.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub freeze_temperature: bool,
}

impl HyperArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup_frac: self.warmup,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            eval_every: self.eval_every,
            freeze_temperature: self.freeze_temperature,
            ..TrainConfig::default()
        }
    }
}

struct Loaded {
    train: Vec<PairItem<f32>>,
    val: Vec<PairItem<f32>>,
    encoder: Option<Encoder>,
}

/// Loads pairs and fixes the model's input widths to what the data holds.
fn load(data: &DataArgs, model: &mut ModelArgs, manifest: &mut RunManifest) -> Outcome<Option<Loaded>> {
    if let Some(n) = data.synthetic {
        if n < 2 {
            return Err(Failure::usage("--synthetic needs at least 2 pairs"));
        }
        let pairs = synthetic_pairs::<f32>(&model.config(1), n, manifest.seeds.get("train").copied().unwrap_or(0));
        return Ok(Some(Loaded { val: pairs.clone(), train: pairs, encoder: None }));
    }
    let Some(path) = &data.data else {
        return Ok(None);
    };
    manifest.input(path)?;
    let encoder = data.encoder.open(manifest)?;
    let root = data.image_root.as_deref();
    let train_inst = read_dataset(path)?;
    let train = pairs_from_instances(&encoder.source, model.variant, &train_inst, root, data.hard_negatives)?;
    let val = match &data.val {
        Some(v) => {
            manifest.input(v)?;
            pairs_from_instances(&encoder.source, model.variant, &read_dataset(v)?, root, false)?
        }
        None => pairs_from_instances(&encoder.source, model.variant, &train_inst, root, false)?,
    };
    encoder.close()?;
    let Some(first) = train.first() else {
        return Err(Failure::new(DATA, anyhow::anyhow!("{} has no instances", path.display())));
    };
    model.visual_dim = first.image.dim();
    model.text_dim = first.text.dim();
    Ok(Some(Loaded { train, val, encoder: Some(encoder) }))
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Fail (exit 3) unless validation accuracy reaches this value.
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    /// Directory for checkpoints, history.csv and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn write_run(out: &Path, best: &Params<f32>, last: &Params<f32>, history: &str, manifest: &mut RunManifest, note: serde_json::Value) -> Outcome {
    std::fs::create_dir_all(out).or_exit(RUNTIME)?;
    for (name, p) in [("best.ckp", best), ("last.ckp", last)] {
        let path = out.join(name);
        save_checkpoint(p, &path, note.clone())?;
        manifest.output(&path);
    }
    let hist = out.join("history.csv");
    std::fs::write(&hist, history).or_exit(RUNTIME)?;
    manifest.output(&hist);
    Ok(())
}

pub fn train_cmd(args: &TrainArgs) -> Outcome {
    let mut manifest = RunManifest::start("train", args);
    manifest.seed("train", args.hyper.seed);
    args.model.config(args.model.layers).validate()?;
    let mut model = args.model.clone();
    let loaded = load(&args.data, &mut model, &mut manifest)?;
    let config = model.config(model.layers);
    config.validate()?;
    let count = config_param_count(&config);
    println!("parameters: {count} ({})", millions(count));
    let Some(loaded) = loaded else {
        println!("no training data given (--data or --synthetic); nothing to train");
        return Ok(());
    };
    let cfg = args.hyper.config();
    cfg.validate()?;
    let init = Params::<f32>::init(&config, args.hyper.seed)?;
    let outcome = train(&cfg, init, &loaded.train, &loaded.val)?;
    let last = outcome.history.last().map_or(f64::NAN, |r| r.loss);
    println!("steps: {}", outcome.history.len());
    println!("best validation accuracy: {:.3} (step {})", outcome.best_accuracy, outcome.best_step);
    println!("final loss: {last:.6}");

    if let Some(out) = &args.out {
        let note = serde_json::json!({ "best_accuracy": outcome.best_accuracy, "best_step": outcome.best_step });
        write_run(out, &outcome.best, &outcome.last, &history_csv(&outcome.history)?, &mut manifest, note)?;
        manifest.finish(&manifest_path(out, true))?;
    }
    if let Some(target) = args.target_accuracy {
        if outcome.best_accuracy < target {
            return Err(Failure::runtime(format!("validation accuracy {:.3} below target {target}", outcome.best_accuracy)));
        }
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 1)]
    pub from: usize,
    #[arg(long, default_value_t = 4)]
    pub to: usize,
    /// Also report the group score of each model on this dataset.
    #[arg(long, requires = "data")]
    pub eval_dataset: Option<PathBuf>,
    /// Directory for sweep.csv, per-depth checkpoints and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    layers: usize,
    params: usize,
    best_val_accuracy: f64,
    best_step: usize,
    final_loss: f64,
    group: Option<f64>,
}

pub fn sweep_cmd(args: &SweepArgs) -> Outcome {
    if args.from == 0 || args.from > args.to {
        return Err(Failure::usage(format!("invalid layer range {}..={}", args.from, args.to)));
    }
    let mut manifest = RunManifest::start("sweep-layers", args);
    manifest.seed("train", args.hyper.seed);
    let mut model = args.model.clone();
    let Some(loaded) = load(&args.data, &mut model, &mut manifest)? else {
        return Err(Failure::usage("sweep-layers needs --data or --synthetic"));
    };
    let eval_set = match &args.eval_dataset {
        Some(p) => {
            manifest.input(p)?;
            Some(read_dataset(p)?)
        }
        None => None,
    };
    let cfg = args.hyper.config();
    cfg.validate()?;

    let mut rows = Vec::new();
    for layers in args.from..=args.to {
        let config = model.config(layers);
        config.validate()?;
        let outcome = train(&cfg, Params::<f32>::init(&config, args.hyper.seed)?, &loaded.train, &loaded.val)?;
        let group = match (&eval_set, &loaded.encoder) {
            (Some(set), Some(enc)) => {
                let scorer = TransformerScorer::new(outcome.best.clone(), enc.source.clone());
                let opts = EvalOptions { lenient: false, image_root: args.data.image_root.clone() };
                Some(evaluate(set, &scorer, &opts)?.average.group)
            }
            _ => None,
        };
        if let Some(out) = &args.out {
            let note = serde_json::json!({ "best_accuracy": outcome.best_accuracy, "best_step": outcome.best_step });
            write_run(&out.join(format!("layers{layers}")), &outcome.best, &outcome.last, &history_csv(&outcome.history)?, &mut manifest, note)?;
        }
        rows.push(SweepRow {
            layers,
            params: config_param_count(&config),
            best_val_accuracy: outcome.best_accuracy,
            best_step: outcome.best_step,
            final_loss: outcome.history.last().map_or(f64::NAN, |r| r.loss),
            group,
        });
    }

    println!("{:>6} {:>10} {:>9} {:>9} {:>11} {:>7}", "layers", "params", "val acc", "best step", "final loss", "group");
    for r in &rows {
        let group = r.group.map_or("-".to_string(), |g| format!("{g:.1}"));
        println!(
            "{:>6} {:>10} {:>9.3} {:>9} {:>11.5} {:>7}",
            r.layers,
            millions(r.params),
            r.best_val_accuracy,
            r.best_step,
            r.final_loss,
            group
        );
    }
    if let Some(enc) = &loaded.encoder {
        enc.close()?;
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).or_exit(RUNTIME)?;
        let path = out.join("sweep.csv");
        let mut w = csv::Writer::from_path(&path).or_exit(RUNTIME)?;
        for r in &rows {
            w.serialize(r).or_exit(RUNTIME)?;
        }
        w.flush().or_exit(RUNTIME)?;
        manifest.output(&path);
        manifest.finish(&manifest_path(out, true))?;
    }
    Ok(())
}
