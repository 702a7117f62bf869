use std::path::PathBuf;

use clap::{Args, ValueEnum};
use compose_probe_core::biscor::{
    build_split, emit_render_jobs, load_clevr_scenes, read_records, record_violations, reused_scenes,
    synthetic_clevr_scenes, write_records, InstanceRecord, SourceSplit, SwapCategory, Templates,
};
use compose_probe_core::eval::{write_dataset, RetrievalInstance};
use serde::Serialize;

use crate::exit::{Failure, Outcome, OrExit, RUNTIME};
use crate::manifest::{manifest_path, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Args, Serialize)]
#[command(group(clap::ArgGroup::new("scene_input").required(true).args(["clevr_scenes", "synthetic_scenes"])))]
pub struct BuildArgs {
    /// CLEVR scenes JSON file (e.g. CLEVR_val_scenes.json).
    #[arg(long)]
    pub clevr_scenes: Option<PathBuf>,
    /// Generate this many CLEVR-like scenes instead of reading a file.
    #[arg(long)]
    pub synthetic_scenes: Option<usize>,
    /// Split of the generated scenes (train builds dev, val builds test).
    #[arg(long, value_enum, default_value = "val")]
    pub clevr_split: SplitArg,
    /// Categories to build, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "color,size,material,quantity")]
    pub category: Vec<SwapCategory>,
    /// Records per category.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file overriding caption templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Verify every record's invariants after building.
    #[arg(long)]
    pub check: bool,
    /// Skip writing per-record scene files and the render manifest.
    #[arg(long)]
    pub no_render_jobs: bool,
}

pub fn build_cmd(args: &BuildArgs) -> Outcome {
    let mut manifest = RunManifest::start("build-biscor", args);
    manifest.seed("biscor", args.seed);
    let templates = match &args.templates {
        Some(path) => {
            manifest.input(path)?;
            Templates::load(path)?
        }
        None => Templates::default(),
    };
    let scenes = match (&args.clevr_scenes, args.synthetic_scenes) {
        (Some(path), _) => {
            manifest.input(path)?;
            load_clevr_scenes(path)?
        }
        (None, Some(n)) => {
            let split = match args.clevr_split {
                SplitArg::Train => SourceSplit::Train,
                SplitArg::Val => SourceSplit::Val,
            };
            synthetic_clevr_scenes(n, split, args.seed)
        }
        (None, None) => unreachable!("clap enforces one input"),
    };
    log::info!("{} scenes loaded", scenes.len());

    std::fs::create_dir_all(&args.out).or_exit(RUNTIME)?;
    let mut categories = args.category.clone();
    categories.sort_unstable();
    categories.dedup();
    let mut all: Vec<Vec<InstanceRecord>> = Vec::new();
    for &category in &categories {
        let records = build_split(&scenes, category, args.n as usize, args.seed, &templates)?;
        let split = records[0].split.name();
        let stem = format!("{category}_{split}");
        let rec_path = args.out.join(format!("{stem}.records.jsonl"));
        write_records(&rec_path, &records)?;
        let inst_path = args.out.join(format!("{stem}.jsonl"));
        let instances: Vec<RetrievalInstance> = records.iter().map(InstanceRecord::to_retrieval_instance).collect();
        write_dataset(&inst_path, &instances)?;
        manifest.output(&rec_path);
        manifest.output(&inst_path);
        if !args.no_render_jobs {
            let dir = args.out.join(&stem);
            let jobs = emit_render_jobs(&records, &dir)?;
            manifest.output(&dir);
            log::info!("{category}: {} render jobs in {}", jobs.len(), dir.display());
        }
        println!("{category}: {} records -> {}", records.len(), inst_path.display());
        all.push(records);
    }

    if args.check {
        let mut problems = Vec::new();
        for records in &all {
            // re-read from disk so the check covers what was written
            let path = args.out.join(format!("{}_{}.records.jsonl", records[0].category, records[0].split.name()));
            let back = read_records(&path)?;
            if back != *records {
                problems.push(format!("{}: file does not round-trip", path.display()));
            }
            for r in &back {
                problems.extend(record_violations(r).into_iter().map(|v| format!("{}: {v}", r.id)));
            }
            problems.extend(reused_scenes(&back).into_iter().map(|s| format!("scene {s} used twice in one category")));
        }
        let total: usize = all.iter().map(Vec::len).sum();
        println!("check: {total} records, {} violations", problems.len());
        for p in &problems {
            println!("  {p}");
        }
        if !problems.is_empty() {
            return Err(Failure::runtime(format!("{} invariant violations", problems.len())));
        }
    }
    manifest.finish(&manifest_path(&args.out, true))?;
    Ok(())
}
