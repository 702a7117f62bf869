//! Embedding matrices and where they come from: the EMB1 file store, the
//! remote encoder client, and the [`EmbeddingSource`] trait that scorers use.

mod remote;
mod source;
mod store;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crops::{CropError, CropRect};

pub use remote::{encode_remote, EncodeBatch, EncoderClient, EncoderEndpoint, KeyedImage, RemoteSource};
pub use source::{EmbeddingSource, ImageRef, StoreSource};
pub use store::{
    decode_container, encode_container, read_container, store_read, store_write, write_container, EmbeddingStore, EMB1_MAGIC,
    EMB1_VERSION,
};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not an embedding store: {0}")]
    Format(String),
    #[error("embedding store is corrupt: {0}")]
    Corrupt(String),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("row {0} has zero norm")]
    ZeroNorm(usize),
    #[error("expected {expected} values for {rows}x{dim}, got {actual}")]
    Shape { rows: usize, dim: usize, expected: usize, actual: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("row {row} has norm {norm} but the matrix is flagged normalized")]
    NotNormalized { row: usize, norm: f32 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("global embedding {key:?} must have exactly one row, has {rows}")]
    GlobalRows { key: String, rows: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("transport failure (retryable): {0}")]
    Transport(String),
    #[error("encoder protocol violation: {0}")]
    Protocol(String),
    #[error("encoder returned HTTP {status}: {message}")]
    Server { status: u16, message: String },
    #[error("{} embedding(s) missing from store: {}", .0.len(), .0.join(", "))]
    CacheMiss(Vec<String>),
    #[error("image {0:?} has no pixel source")]
    NoPixels(String),
    #[error(transparent)]
    Image(#[from] CropError),
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Transport(_) | EmbedError::Server { status: 503, .. })
    }
}

/// Row-major `rows x dim` matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

const NORM_TOLERANCE: f32 = 1e-3;

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, EmbedError> {
        Self::with_flag(rows, dim, data, false)
    }

    /// Builds a matrix and checks every invariant, including unit row norms
    /// when `normalized` is set.
    pub fn with_flag(rows: usize, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self, EmbedError> {
        let expected = rows.checked_mul(dim).ok_or(EmbedError::Shape { rows, dim, expected: usize::MAX, actual: data.len() })?;
        if data.len() != expected {
            return Err(EmbedError::Shape { rows, dim, expected, actual: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        let m = Self { rows, dim, data, normalized };
        if normalized {
            for r in 0..rows {
                let norm = row_norm(m.row(r));
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(EmbedError::NotNormalized { row: r, norm });
                }
            }
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, EmbedError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(EmbedError::DimMismatch { expected: dim, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    /// Stacks matrices vertically; all must share `dim`.
    pub fn stack<'a>(parts: impl IntoIterator<Item = &'a EmbeddingMatrix>, dim: usize) -> Result<Self, EmbedError> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut normalized = true;
        for p in parts {
            if p.dim != dim {
                return Err(EmbedError::DimMismatch { expected: dim, actual: p.dim });
            }
            rows += p.rows;
            normalized &= p.normalized;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, dim, data, normalized: normalized && rows > 0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    /// Single-row matrix holding row `r`.
    pub fn row_matrix(&self, r: usize) -> Self {
        Self { rows: 1, dim: self.dim, data: self.row(r).to_vec(), normalized: self.normalized }
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

fn row_norm(row: &[f32]) -> f32 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt() as f32
}

/// Divides every row by its L2 norm.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix, EmbedError> {
    let mut data = Vec::with_capacity(matrix.data.len());
    for (r, row) in matrix.row_iter().enumerate() {
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroNorm(r));
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    Ok(EmbeddingMatrix { rows: matrix.rows, dim: matrix.dim, data, normalized: true })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbeddingKind {
    GlobalImage,
    GlobalText,
    PatchSequence,
    TokenSequence,
}

impl EmbeddingKind {
    pub fn code(self) -> u8 {
        match self {
            EmbeddingKind::GlobalImage => 0,
            EmbeddingKind::GlobalText => 1,
            EmbeddingKind::PatchSequence => 2,
            EmbeddingKind::TokenSequence => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => EmbeddingKind::GlobalImage,
            1 => EmbeddingKind::GlobalText,
            2 => EmbeddingKind::PatchSequence,
            3 => EmbeddingKind::TokenSequence,
            _ => return None,
        })
    }

    pub fn is_global(self) -> bool {
        matches!(self, EmbeddingKind::GlobalImage | EmbeddingKind::GlobalText)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub key: String,
    pub kind: EmbeddingKind,
    pub matrix: EmbeddingMatrix,
}

impl EmbeddingRecord {
    pub fn new(key: impl Into<String>, kind: EmbeddingKind, matrix: EmbeddingMatrix) -> Result<Self, EmbedError> {
        let key = key.into();
        if kind.is_global() && matrix.rows() != 1 {
            return Err(EmbedError::GlobalRows { key, rows: matrix.rows() });
        }
        Ok(Self { key, kind, matrix })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderLayer {
    Last,
    Penultimate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub model_name: String,
    pub embedding_dim: usize,
    pub layer: EncoderLayer,
    pub input_side: u32,
}

impl EncoderDescriptor {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.embedding_dim == 0 {
            return Err(EmbedError::Protocol("descriptor embedding_dim must be positive".into()));
        }
        if self.input_side == 0 {
            return Err(EmbedError::Protocol("descriptor input_side must be positive".into()));
        }
        Ok(())
    }

    /// File name for a per-model embedding cache.
    pub fn cache_file_name(&self) -> String {
        let layer = match self.layer {
            EncoderLayer::Last => "last",
            EncoderLayer::Penultimate => "penultimate",
        };
        let safe: String = self
            .model_name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        format!("{safe}-{layer}-{}.emb", self.input_side)
    }
}

/// Cache directory named by the `COMPOSE_PROBE_CACHE` environment variable.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os("COMPOSE_PROBE_CACHE").filter(|v| !v.is_empty()).map(PathBuf::from)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn crop_key(image_id: &str, rect: CropRect) -> String {
    format!("img:{image_id}/crop:{rect}")
}

pub fn patches_key(image_id: &str) -> String {
    format!("img:{image_id}/patches")
}

pub fn text_key(text: &str) -> String {
    format!("txt:{}", sha256_hex(text.as_bytes()))
}

pub fn tokens_key(text: &str) -> String {
    format!("txt:{}/tokens", sha256_hex(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_three_four() {
        let m = EmbeddingMatrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&m).unwrap();
        assert!(n.is_normalized());
        assert!((n.data()[0] - 0.6).abs() < 1e-7);
        assert!((n.data()[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_is_idempotent() {
        let m = EmbeddingMatrix::new(2, 3, vec![0.3, -1.2, 2.0, 5.0, 0.1, 0.0]).unwrap();
        let once = l2_normalize(&m).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_zero_row_fails() {
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(l2_normalize(&m), Err(EmbedError::ZeroNorm(1))));
    }

    #[test]
    fn matrix_invariants() {
        assert!(matches!(EmbeddingMatrix::new(2, 2, vec![1.0; 3]), Err(EmbedError::Shape { .. })));
        assert!(matches!(EmbeddingMatrix::new(1, 2, vec![1.0, f32::NAN]), Err(EmbedError::NonFinite(1))));
        assert!(matches!(
            EmbeddingMatrix::with_flag(1, 2, vec![1.0, 1.0], true),
            Err(EmbedError::NotNormalized { .. })
        ));
        assert!(EmbeddingMatrix::with_flag(1, 2, vec![0.6, 0.8], true).is_ok());
    }

    #[test]
    fn global_records_have_one_row() {
        let m = EmbeddingMatrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(EmbeddingRecord::new("k", EmbeddingKind::GlobalText, m.clone()).is_err());
        assert!(EmbeddingRecord::new("k", EmbeddingKind::TokenSequence, m).is_ok());
    }

    #[test]
    fn keys() {
        assert_eq!(crop_key("000123", CropRect::new(1, 2, 3, 4)), "img:000123/crop:1,2,3,4");
        assert_eq!(text_key("a").len(), 4 + 64);
        assert!(tokens_key("a").ends_with("/tokens"));
    }
}
