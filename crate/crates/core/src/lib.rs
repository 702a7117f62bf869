//! Structure-guided inference and bidirectional compositional retrieval
//! evaluation for frozen dual-encoder vision-language models.
//!
//! The crate is organised the way a run flows:
//!
//! - [`crops`]: multi-scale crop planning and bilinear crop extraction.
//! - [`segment`]: caption decomposition into attribute phrases.
//! - [`embedding`]: the EMB1 embedding store and the remote encoder client.
//! - [`sgi`]: crop/segment similarity matching and the global baseline.
//! - [`eval`]: I2T / T2I / Group metrics and per-category reports.
//! - [`biscor`]: swap-benchmark construction from CLEVR scene graphs.

pub mod biscor;
pub mod crops;
pub mod embedding;
pub mod eval;
pub mod segment;
pub mod sgi;

pub use crops::{CropConfig, CropRect, ImageRaster, Placement};
pub use embedding::{EmbeddingKind, EmbeddingMatrix, EmbeddingRecord, EncoderDescriptor};
pub use eval::{EvalReport, RetrievalInstance, ScoreQuad, Scorer};
pub use segment::{CaptionSegments, Granularity, SegmentSource, SegmentationStrategy};
