use std::path::PathBuf;

use clap::{Args, ValueEnum};
use compose_probe_align::{load_checkpoint, TransformerScorer};
use compose_probe_core::eval::{
    evaluate, read_dataset, synthetic_instances, EvalOptions, EvalReport, Percentages, RandomScorer, Scorer,
};
use compose_probe_core::segment::{Lexicon, SegmentSource, SegmentationStrategy, Segmenter};
use compose_probe_core::sgi::{GlobalScorer, SgiConfig, SgiScorer};
use serde::Serialize;

use crate::exit::{Failure, Outcome, OrExit, DATA, RUNTIME};
use crate::manifest::{manifest_path, RunManifest};
use crate::plan::{CropArgs, GranularityArg, StrategyArg};
use crate::source::EncoderArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Global,
    Sgi,
    Transformer,
    Random,
}

#[derive(Debug, Args, Serialize)]
#[command(group(clap::ArgGroup::new("eval_input").required(true).args(["dataset", "synthetic"])))]
pub struct EvalArgs {
    /// Evaluator JSONL dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Evaluate this many placeholder instances instead of a dataset.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Category name for --synthetic instances.
    #[arg(long, default_value = "synthetic")]
    pub category: String,
    #[arg(long, value_enum)]
    pub scorer: ScorerKind,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub crops: CropArgs,
    #[arg(long, value_enum, default_value = "coarse")]
    pub granularity: GranularityArg,
    /// Segment source for SGI; structured falls back to automatic for
    /// instances without annotations.
    #[arg(long, value_enum, default_value = "structured")]
    pub segments: StrategyArg,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Trained alignment model for --scorer transformer.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed for --scorer random.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip instances the scorer fails on instead of aborting.
    #[arg(long)]
    pub lenient: bool,
    /// Directory image ids are resolved against.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Directory for report.json, report.csv and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval_cmd(args: &EvalArgs) -> Outcome {
    let mut manifest = RunManifest::start("eval", args);
    let dataset = match (&args.dataset, args.synthetic) {
        (Some(path), _) => {
            manifest.input(path)?;
            read_dataset(path)?
        }
        (None, Some(n)) => synthetic_instances(n, &args.category),
        (None, None) => unreachable!("clap enforces one input"),
    };
    if dataset.is_empty() {
        return Err(Failure::new(DATA, anyhow::anyhow!("dataset has no instances")));
    }

    let mut encoder = None;
    let scorer: Box<dyn Scorer> = match args.scorer {
        ScorerKind::Random => {
            manifest.seed("random_scorer", args.seed);
            Box::new(RandomScorer { seed: args.seed })
        }
        ScorerKind::Global => {
            let enc = args.encoder.open(&mut manifest)?;
            let s = Box::new(GlobalScorer::new(enc.source.clone()));
            encoder = Some(enc);
            s
        }
        ScorerKind::Sgi => {
            let enc = args.encoder.open(&mut manifest)?;
            let segmenter = match &args.lexicon {
                Some(dir) => Segmenter::new(Lexicon::with_overrides(dir).or_exit(RUNTIME)?),
                None => Segmenter::default(),
            };
            let source = match args.segments {
                StrategyArg::Structured => SegmentSource::Structured,
                StrategyArg::Automatic => SegmentSource::Automatic,
            };
            let config = SgiConfig {
                crops: args.crops.config(),
                strategy: SegmentationStrategy::new(args.granularity.into(), source),
            };
            let s = Box::new(SgiScorer::new(enc.source.clone(), config, segmenter));
            encoder = Some(enc);
            s
        }
        ScorerKind::Transformer => {
            let Some(ckpt) = &args.checkpoint else {
                return Err(Failure::usage("--scorer transformer needs --checkpoint"));
            };
            manifest.input(ckpt)?;
            let (params, _) = load_checkpoint(ckpt)?;
            let enc = args.encoder.open(&mut manifest)?;
            let s = Box::new(TransformerScorer::new(params, enc.source.clone()));
            encoder = Some(enc);
            s
        }
    };

    let opts = EvalOptions { lenient: args.lenient, image_root: args.image_root.clone() };
    let result = evaluate(&dataset, scorer.as_ref(), &opts);
    if let Some(enc) = &encoder {
        enc.close()?;
    }
    let report = result?;
    print!("{}", report.to_table());

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).or_exit(RUNTIME)?;
        let json = out.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(&report).or_exit(RUNTIME)? + "\n").or_exit(RUNTIME)?;
        let csv = out.join("report.csv");
        std::fs::write(&csv, report.to_csv()).or_exit(RUNTIME)?;
        manifest.output(&json);
        manifest.output(&csv);
        manifest.finish(&manifest_path(out, true))?;
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// report.json files written by `eval`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Also write the combined table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn report_cmd(args: &ReportArgs) -> Outcome {
    let mut manifest = RunManifest::start("report", args);
    let mut rows: Vec<(String, String, usize, Percentages)> = Vec::new();
    let mut baseline = None;
    for path in &args.reports {
        manifest.input(path)?;
        let text = std::fs::read_to_string(path).or_exit(RUNTIME)?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| {
            Failure::new(DATA, anyhow::anyhow!("{}: {e}", path.display()))
        })?;
        for c in &report.categories {
            rows.push((report.scorer.clone(), c.category.clone(), c.instances, c.scores.clone()));
        }
        rows.push((report.scorer.clone(), "average".into(), report.instances, report.average.clone()));
        baseline.get_or_insert(report.random_baseline.clone());
    }

    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
    println!("{:<width$}  {:<12} {:>9} {:>7} {:>7} {:>7}", "scorer", "category", "instances", "I2T", "T2I", "Group");
    for (scorer, cat, n, p) in &rows {
        println!("{scorer:<width$}  {cat:<12} {n:>9} {:>7.1} {:>7.1} {:>7.1}", p.i2t, p.t2i, p.group);
    }
    if let Some(p) = &baseline {
        println!("{:<width$}  {:<12} {:>9} {:>7.1} {:>7.1} {:>7.1}", "random", "", "", p.i2t, p.t2i, p.group);
    }

    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_path(path).or_exit(RUNTIME)?;
        w.write_record(["scorer", "category", "instances", "i2t", "t2i", "group"]).or_exit(RUNTIME)?;
        for (scorer, cat, n, p) in &rows {
            let cells = [scorer.clone(), cat.clone(), n.to_string(), format!("{:.2}", p.i2t), format!("{:.2}", p.t2i), format!("{:.2}", p.group)];
            w.write_record(&cells).or_exit(RUNTIME)?;
        }
        if let Some(p) = &baseline {
            let cells = ["random".into(), String::new(), String::new(), format!("{:.2}", p.i2t), format!("{:.2}", p.t2i), format!("{:.2}", p.group)];
            w.write_record(&cells).or_exit(RUNTIME)?;
        }
        w.flush().or_exit(RUNTIME)?;
        manifest.output(path);
        manifest.finish(&manifest_path(path, false))?;
    }
    Ok(())
}
