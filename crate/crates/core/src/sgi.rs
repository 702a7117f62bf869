//! Structure-guided inference: embed every crop and every caption segment,
//! match each segment to its most similar crop, and average the matched
//! similarities. The global baseline is the single-crop, single-segment
//! special case.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crops::{plan_crops, CropConfig, CropError, CropRect};
use crate::embedding::{l2_normalize, EmbedError, EmbeddingMatrix, EmbeddingSource, ImageRef};
use crate::eval::{CaptionInput, ScoreError, Scorer};
use crate::segment::{segment_structured, CaptionSegments, SegmentError, SegmentSource, SegmentationStrategy, Segmenter};

#[derive(Debug, Error)]
pub enum SgiError {
    #[error("embedding width mismatch: crops have {crops}, segments have {segments}")]
    DimMismatch { crops: usize, segments: usize },
    #[error("similarity matrix is empty ({rows}x{cols})")]
    Empty { rows: usize, cols: usize },
    #[error("match set is empty")]
    NoMatches,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Crop(#[from] CropError),
}

/// Cosine similarities, rows are crops and columns are segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n_crops: usize,
    n_segments: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_values(n_crops: usize, n_segments: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n_crops * n_segments, "similarity matrix shape");
        Self { n_crops, n_segments, values }
    }

    pub fn n_crops(&self) -> usize {
        self.n_crops
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn get(&self, crop: usize, segment: usize) -> f64 {
        self.values[crop * self.n_segments + segment]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatch {
    pub segment: usize,
    pub crop: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub matches: Vec<SegmentMatch>,
}

fn unit_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, EmbedError> {
    if m.is_normalized() {
        Ok(m.clone())
    } else {
        l2_normalize(m)
    }
}

/// Cosine similarity of every crop row against every segment row.
pub fn sim_matrix(crops: &EmbeddingMatrix, segments: &EmbeddingMatrix) -> Result<SimilarityMatrix, SgiError> {
    if crops.dim() != segments.dim() {
        return Err(SgiError::DimMismatch { crops: crops.dim(), segments: segments.dim() });
    }
    let v = unit_rows(crops)?;
    let l = unit_rows(segments)?;
    let mut values = Vec::with_capacity(v.rows() * l.rows());
    for vi in v.row_iter() {
        for lj in l.row_iter() {
            let dot: f64 = vi.iter().zip(lj).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            values.push(dot);
        }
    }
    Ok(SimilarityMatrix { n_crops: v.rows(), n_segments: l.rows(), values })
}

/// Column-wise argmax; ties go to the lowest crop index.
pub fn match_segments(matrix: &SimilarityMatrix) -> Result<MatchSet, SgiError> {
    if matrix.n_crops == 0 || matrix.n_segments == 0 {
        return Err(SgiError::Empty { rows: matrix.n_crops, cols: matrix.n_segments });
    }
    let matches = (0..matrix.n_segments)
        .map(|j| {
            let mut best = 0;
            for i in 1..matrix.n_crops {
                if matrix.get(i, j) > matrix.get(best, j) {
                    best = i;
                }
            }
            SegmentMatch { segment: j, crop: best, similarity: matrix.get(best, j) }
        })
        .collect();
    Ok(MatchSet { matches })
}

/// Mean matched similarity.
pub fn aggregate(matches: &MatchSet) -> Result<f64, SgiError> {
    if matches.matches.is_empty() {
        return Err(SgiError::NoMatches);
    }
    let sum: f64 = matches.matches.iter().map(|m| m.similarity).sum();
    Ok(sum / matches.matches.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgiConfig {
    pub crops: CropConfig,
    pub strategy: SegmentationStrategy,
}

impl Default for SgiConfig {
    fn default() -> Self {
        Self { crops: CropConfig::grid(), strategy: SegmentationStrategy::default() }
    }
}

/// Everything that went into one SGI score.
#[derive(Debug, Clone)]
pub struct SgiTrace {
    pub rects: Vec<CropRect>,
    pub segments: CaptionSegments,
    pub similarities: SimilarityMatrix,
    pub matches: MatchSet,
    pub score: f64,
}

pub fn segments_for(
    caption: &CaptionInput<'_>,
    strategy: SegmentationStrategy,
    segmenter: &Segmenter,
) -> Result<CaptionSegments, SegmentError> {
    match (strategy.source, caption.annotation) {
        (SegmentSource::Structured, Some(ann)) => segment_structured(ann, caption.text, strategy.granularity),
        _ => segmenter.segment_with(caption.text, strategy.granularity),
    }
}

pub fn sgi_trace(
    image: &ImageRef,
    caption: &CaptionInput<'_>,
    source: &dyn EmbeddingSource,
    config: &SgiConfig,
    segmenter: &Segmenter,
) -> Result<SgiTrace, SgiError> {
    let side = source.descriptor().input_side;
    let rects = plan_crops(side, side, &config.crops)?;
    let crop_embs = source.image_crops(image, &rects)?;
    let segments = segments_for(caption, config.strategy, segmenter)?;
    let seg_embs = source.texts(segments.segments())?;
    let similarities = sim_matrix(&crop_embs, &seg_embs)?;
    let matches = match_segments(&similarities)?;
    let score = aggregate(&matches)?;
    Ok(SgiTrace { rects, segments, similarities, matches, score })
}

pub fn sgi_score(
    image: &ImageRef,
    caption: &CaptionInput<'_>,
    source: &dyn EmbeddingSource,
    config: &SgiConfig,
    segmenter: &Segmenter,
) -> Result<f64, SgiError> {
    sgi_trace(image, caption, source, config, segmenter).map(|t| t.score)
}

/// Cosine between the whole-image and whole-caption global embeddings.
pub fn global_score(image: &ImageRef, caption: &str, source: &dyn EmbeddingSource) -> Result<f64, SgiError> {
    let v = source.image_global(image)?;
    let l = source.texts(&[caption.to_string()])?;
    Ok(sim_matrix(&v, &l)?.get(0, 0))
}

pub struct SgiScorer<S> {
    source: S,
    config: SgiConfig,
    segmenter: Segmenter,
}

impl<S: EmbeddingSource> SgiScorer<S> {
    pub fn new(source: S, config: SgiConfig, segmenter: Segmenter) -> Self {
        Self { source, config, segmenter }
    }

    pub fn source(&self) -> &S {
        &self.source
    }
}

impl<S: EmbeddingSource> Scorer for SgiScorer<S> {
    fn describe(&self) -> String {
        let c = &self.config;
        format!(
            "sgi[{} placement={:?} sizes={} granularity={:?} segments={:?}]",
            self.source.descriptor().model_name,
            c.crops.placement,
            c.crops.sizes.len(),
            c.strategy.granularity,
            c.strategy.source,
        )
    }

    fn score(&self, image: &ImageRef, caption: &CaptionInput<'_>) -> Result<f64, ScoreError> {
        Ok(sgi_score(image, caption, &self.source, &self.config, &self.segmenter)?)
    }
}

pub struct GlobalScorer<S> {
    source: S,
}

impl<S: EmbeddingSource> GlobalScorer<S> {
    pub fn new(source: S) -> Self {
        Self { source }
    }

    pub fn source(&self) -> &S {
        &self.source
    }
}

impl<S: EmbeddingSource> Scorer for GlobalScorer<S> {
    fn describe(&self) -> String {
        format!("global[{}]", self.source.descriptor().model_name)
    }

    fn score(&self, image: &ImageRef, caption: &CaptionInput<'_>) -> Result<f64, ScoreError> {
        Ok(global_score(image, caption.text, &self.source)?)
    }
}
