//! `CKP1` tensor container (the embedding-store layout under its own magic)
//! plus a JSON sidecar holding the model config.

use std::fs;
use std::path::{Path, PathBuf};

use compose_probe_core::embedding::{read_container, write_container, EmbeddingKind, EmbeddingMatrix, EmbeddingRecord};
use serde::{Deserialize, Serialize};

use crate::config::TransformerConfig;
use crate::params::{Params, TensorSpec};
use crate::{AlignError, Scalar};

pub const CKP1_MAGIC: [u8; 4] = *b"CKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TransformerConfig,
    pub param_count: usize,
    pub tensors: Vec<TensorSpec>,
    #[serde(default)]
    pub note: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> AlignError + '_ {
    move |source| AlignError::Io { path: path.display().to_string(), source }
}

/// Writes `path` and `path.json`. Values are stored as f32.
pub fn save_checkpoint<F: Scalar>(params: &Params<F>, path: impl AsRef<Path>, note: serde_json::Value) -> Result<(), AlignError> {
    let path = path.as_ref();
    let mut records = Vec::with_capacity(params.layout().tensors().len());
    for t in params.layout().tensors() {
        let (rows, dim) = match t.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => (1, t.len()),
        };
        let data: Vec<f32> = params.data()[t.range()].iter().map(|v| v.f64() as f32).collect();
        let m = EmbeddingMatrix::new(rows, dim, data)?;
        records.push(EmbeddingRecord::new(t.name.clone(), EmbeddingKind::TokenSequence, m)?);
    }
    write_container(path, CKP1_MAGIC, &records)?;
    let meta = CheckpointMeta {
        config: params.config().clone(),
        param_count: params.data().len(),
        tensors: params.layout().tensors().to_vec(),
        note,
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| AlignError::Format(e.to_string()))?;
    fs::write(&side, text).map_err(io(&side))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Params<f32>, CheckpointMeta), AlignError> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io(&side))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| AlignError::Format(format!("{}: {e}", side.display())))?;
    let records = read_container(path, CKP1_MAGIC)?;
    let mut params = Params::<f32>::init(&meta.config, 0)?;
    if params.layout().tensors() != meta.tensors.as_slice() {
        return Err(AlignError::Format("checkpoint tensor list does not match its config".into()));
    }
    if records.len() != meta.tensors.len() {
        return Err(AlignError::Format(format!("checkpoint holds {} tensors, config implies {}", records.len(), meta.tensors.len())));
    }
    for (rec, t) in records.iter().zip(&meta.tensors) {
        if rec.key != t.name || rec.matrix.data().len() != t.len() {
            return Err(AlignError::Format(format!("tensor {} does not match {}{:?}", rec.key, t.name, t.shape)));
        }
        params.data_mut()[t.range()].copy_from_slice(rec.matrix.data());
    }
    Ok((params, meta))
}
