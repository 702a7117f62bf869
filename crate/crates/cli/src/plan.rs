use std::path::PathBuf;

use clap::{Args, ValueEnum};
use compose_probe_core::crops::{plan_crops, CropConfig, Placement, DEFAULT_CROP_SIZES};
use compose_probe_core::segment::{
    segment_structured, Granularity, Lexicon, SegmentAnnotation, SegmentError, Segmenter,
};
use serde::{Deserialize, Serialize};

use crate::exit::{Failure, Outcome, OrExit, DATA, RUNTIME, USAGE};
use crate::manifest::{manifest_path, RunManifest};

/// `WxH` pairs separated by commas, e.g. `32x32,56x112`.
pub fn parse_sizes(s: &str) -> Result<Vec<(u32, u32)>, String> {
    s.split(',')
        .map(|part| {
            let (w, h) = part.trim().split_once(['x', 'X']).ok_or_else(|| format!("size {part:?} is not WxH"))?;
            let w = w.parse::<u32>().map_err(|e| format!("size {part:?}: {e}"))?;
            let h = h.parse::<u32>().map_err(|e| format!("size {part:?}: {e}"))?;
            Ok((w, h))
        })
        .collect()
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CropArgs {
    /// Crop placement.
    #[arg(long, default_value = "grid")]
    pub placement: Placement,
    /// Crop sizes as comma-separated WxH pairs.
    #[arg(long, value_parser = parse_sizes)]
    pub sizes: Option<Vec<(u32, u32)>>,
    /// Also emit the whole-image rect.
    #[arg(long)]
    pub include_full_image: bool,
}

impl CropArgs {
    pub fn config(&self) -> CropConfig {
        CropConfig {
            sizes: self.sizes.clone().unwrap_or_else(|| DEFAULT_CROP_SIZES.to_vec()),
            placement: self.placement,
            include_full_image: self.include_full_image,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PlanCropsArgs {
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    #[command(flatten)]
    pub crops: CropArgs,
    /// Write the crop list here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn plan_crops_cmd(args: &PlanCropsArgs) -> Outcome {
    let mut manifest = RunManifest::start("plan-crops", args);
    let config = args.crops.config();
    let rects = plan_crops(args.width, args.height, &config).or_exit(USAGE)?;
    for &(w, h) in &config.sizes {
        let n = rects.iter().filter(|r| (r.w, r.h) == (w, h)).count();
        println!("{w}x{h}: {n}");
    }
    if config.include_full_image && !config.sizes.contains(&(args.width, args.height)) {
        println!("full: 1");
    }
    println!("total: {}", rects.len());
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&rects).or_exit(RUNTIME)? + "\n").or_exit(RUNTIME)?;
        manifest.output(out);
        manifest.finish(&manifest_path(out, false))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GranularityArg {
    Coarse,
    Fine,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Coarse => Granularity::CoarseGrained,
            GranularityArg::Fine => Granularity::FineGrained,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyArg {
    Automatic,
    Structured,
}

#[derive(Debug, Args, Serialize)]
#[command(group(clap::ArgGroup::new("segment_input").required(true).args(["caption", "corpus"])))]
pub struct SegmentArgs {
    #[arg(long)]
    pub caption: Option<String>,
    /// Check every entry of a golden JSON corpus (caption, granularity,
    /// segments) byte-exactly.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "coarse")]
    pub granularity: GranularityArg,
    #[arg(long, value_enum, default_value = "automatic")]
    pub strategy: StrategyArg,
    /// Phrase annotation (JSON) for the structured strategy.
    #[arg(long)]
    pub annotation: Option<PathBuf>,
    /// Directory of lexicon override files.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct GoldenCase {
    caption: String,
    granularity: Granularity,
    segments: Vec<String>,
}

fn segment_failure(e: SegmentError) -> Failure {
    match e {
        SegmentError::EmptyCaption => Failure::new(USAGE, e),
        SegmentError::Inconsistent { .. } => Failure::new(DATA, e),
        SegmentError::Lexicon { .. } => Failure::new(RUNTIME, e),
    }
}

pub fn segment_cmd(args: &SegmentArgs) -> Outcome {
    let segmenter = match &args.lexicon {
        Some(dir) => Segmenter::new(Lexicon::with_overrides(dir).map_err(segment_failure)?),
        None => Segmenter::default(),
    };
    let granularity = Granularity::from(args.granularity);

    if let Some(path) = &args.corpus {
        let text = std::fs::read_to_string(path).or_exit(RUNTIME)?;
        let cases: Vec<GoldenCase> = serde_json::from_str(&text).or_exit(DATA)?;
        let mut mismatches = 0;
        for case in &cases {
            let got = segmenter.segment_with(&case.caption, case.granularity).map_err(segment_failure)?.into_vec();
            if got != case.segments {
                mismatches += 1;
                println!("mismatch: {:?}\n  expected {:?}\n  got      {:?}", case.caption, case.segments, got);
            }
        }
        println!("corpus: {}/{} byte-exact", cases.len() - mismatches, cases.len());
        return if mismatches == 0 { Ok(()) } else { Err(Failure::runtime(format!("{mismatches} corpus mismatches"))) };
    }

    let caption = args.caption.as_deref().unwrap_or_default();
    let segments = match (args.strategy, &args.annotation) {
        (StrategyArg::Structured, Some(path)) => {
            let text = std::fs::read_to_string(path).or_exit(RUNTIME)?;
            let ann: SegmentAnnotation = serde_json::from_str(&text).or_exit(DATA)?;
            segment_structured(&ann, caption, granularity).map_err(segment_failure)?
        }
        (StrategyArg::Structured, None) => return Err(Failure::usage("--strategy structured needs --annotation")),
        (StrategyArg::Automatic, _) => segmenter.segment_with(caption, granularity).map_err(segment_failure)?,
    };
    println!("{}", serde_json::to_string(segments.segments()).or_exit(RUNTIME)?);
    Ok(())
}
