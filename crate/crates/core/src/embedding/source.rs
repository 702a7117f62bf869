use std::path::{Path, PathBuf};

use super::{
    crop_key, patches_key, text_key, tokens_key, EmbedError, EmbeddingKind, EmbeddingMatrix, EmbeddingStore,
    EncoderDescriptor, EncoderLayer,
};
use crate::crops::{CropRect, ImageRaster};

/// An image as scorers see it: a stable id (used in embedding keys) and,
/// when pixels are needed, the file that holds them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageRef {
    pub id: String,
    pub path: Option<PathBuf>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), path: None }
    }

    pub fn with_path(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self { id: id.into(), path: Some(path.into()) }
    }

    /// `id` is used verbatim; the file is `root/id` when `root` is given.
    pub fn resolve(id: &str, root: Option<&Path>) -> Self {
        match root {
            Some(root) => Self::with_path(id, root.join(id)),
            None => Self::with_path(id, id),
        }
    }

    pub fn load(&self) -> Result<ImageRaster, EmbedError> {
        let path = self.path.as_ref().ok_or_else(|| EmbedError::NoPixels(self.id.clone()))?;
        Ok(ImageRaster::load(path)?)
    }
}

/// Frozen encoder outputs, however they are obtained.
///
/// Crop rects are expressed in the preprocessed `input_side x input_side`
/// frame of the image. Implementations must be deterministic: the same
/// request always yields the same values.
pub trait EmbeddingSource: Send + Sync {
    fn descriptor(&self) -> &EncoderDescriptor;

    /// One global embedding row per rect, in rect order.
    fn image_crops(&self, image: &ImageRef, rects: &[CropRect]) -> Result<EmbeddingMatrix, EmbedError>;

    /// One global embedding row per text, in order.
    fn texts(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError>;

    fn image_patches(&self, image: &ImageRef) -> Result<EmbeddingMatrix, EmbedError>;

    fn text_tokens(&self, text: &str) -> Result<EmbeddingMatrix, EmbedError>;

    /// Global embedding of the whole (preprocessed) image.
    fn image_global(&self, image: &ImageRef) -> Result<EmbeddingMatrix, EmbedError> {
        let side = self.descriptor().input_side;
        self.image_crops(image, &[CropRect::full(side, side)])
    }
}

impl<T: EmbeddingSource + ?Sized> EmbeddingSource for std::sync::Arc<T> {
    fn descriptor(&self) -> &EncoderDescriptor {
        (**self).descriptor()
    }

    fn image_crops(&self, image: &ImageRef, rects: &[CropRect]) -> Result<EmbeddingMatrix, EmbedError> {
        (**self).image_crops(image, rects)
    }

    fn texts(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        (**self).texts(texts)
    }

    fn image_patches(&self, image: &ImageRef) -> Result<EmbeddingMatrix, EmbedError> {
        (**self).image_patches(image)
    }

    fn text_tokens(&self, text: &str) -> Result<EmbeddingMatrix, EmbedError> {
        (**self).text_tokens(text)
    }
}

impl<T: EmbeddingSource + ?Sized> EmbeddingSource for &T {
    fn descriptor(&self) -> &EncoderDescriptor {
        (**self).descriptor()
    }

    fn image_crops(&self, image: &ImageRef, rects: &[CropRect]) -> Result<EmbeddingMatrix, EmbedError> {
        (**self).image_crops(image, rects)
    }

    fn texts(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        (**self).texts(texts)
    }

    fn image_patches(&self, image: &ImageRef) -> Result<EmbeddingMatrix, EmbedError> {
        (**self).image_patches(image)
    }

    fn text_tokens(&self, text: &str) -> Result<EmbeddingMatrix, EmbedError> {
        (**self).text_tokens(text)
    }
}

/// Serves lookups from a precomputed store. Missing keys are reported all
/// at once.
#[derive(Debug, Clone)]
pub struct StoreSource {
    store: EmbeddingStore,
    descriptor: EncoderDescriptor,
}

impl StoreSource {
    pub fn new(store: EmbeddingStore, descriptor: EncoderDescriptor) -> Result<Self, EmbedError> {
        descriptor.validate()?;
        if let Some(r) = store.records().iter().find(|r| r.matrix.dim() != descriptor.embedding_dim) {
            return Err(EmbedError::DimMismatch { expected: descriptor.embedding_dim, actual: r.matrix.dim() });
        }
        Ok(Self { store, descriptor })
    }

    /// Infers the descriptor from the first record's width.
    pub fn from_store(store: EmbeddingStore, model_name: &str, input_side: u32) -> Result<Self, EmbedError> {
        let dim = store.records().first().map_or(1, |r| r.matrix.dim());
        let descriptor = EncoderDescriptor {
            model_name: model_name.to_string(),
            embedding_dim: dim,
            layer: EncoderLayer::Last,
            input_side,
        };
        Self::new(store, descriptor)
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    fn lookup(&self, keys: &[String], kind: EmbeddingKind) -> Result<EmbeddingMatrix, EmbedError> {
        let missing: Vec<String> = keys.iter().filter(|k| !self.store.contains(k)).cloned().collect();
        if !missing.is_empty() {
            return Err(EmbedError::CacheMiss(missing));
        }
        let mats: Vec<&EmbeddingMatrix> = keys
            .iter()
            .map(|k| {
                let r = self.store.get(k).expect("checked above");
                if kind.is_global() && r.matrix.rows() != 1 {
                    return Err(EmbedError::GlobalRows { key: k.clone(), rows: r.matrix.rows() });
                }
                Ok(&r.matrix)
            })
            .collect::<Result<_, _>>()?;
        EmbeddingMatrix::stack(mats, self.descriptor.embedding_dim)
    }
}

impl EmbeddingSource for StoreSource {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn image_crops(&self, image: &ImageRef, rects: &[CropRect]) -> Result<EmbeddingMatrix, EmbedError> {
        let keys: Vec<String> = rects.iter().map(|&r| crop_key(&image.id, r)).collect();
        self.lookup(&keys, EmbeddingKind::GlobalImage)
    }

    fn texts(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        let keys: Vec<String> = texts.iter().map(|t| text_key(t)).collect();
        self.lookup(&keys, EmbeddingKind::GlobalText)
    }

    fn image_patches(&self, image: &ImageRef) -> Result<EmbeddingMatrix, EmbedError> {
        self.lookup(&[patches_key(&image.id)], EmbeddingKind::PatchSequence)
    }

    fn text_tokens(&self, text: &str) -> Result<EmbeddingMatrix, EmbedError> {
        self.lookup(&[tokens_key(text)], EmbeddingKind::TokenSequence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingRecord;

    fn store() -> EmbeddingStore {
        let one = |v: Vec<f32>| EmbeddingMatrix::new(1, 2, v).unwrap();
        EmbeddingStore::from_records(vec![
            EmbeddingRecord::new(crop_key("im", CropRect::full(224, 224)), EmbeddingKind::GlobalImage, one(vec![1.0, 0.0])).unwrap(),
            EmbeddingRecord::new(text_key("a cube"), EmbeddingKind::GlobalText, one(vec![0.0, 1.0])).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn lookups() {
        let src = StoreSource::from_store(store(), "m", 224).unwrap();
        let img = src.image_global(&ImageRef::new("im")).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0]);
        let t = src.texts(&["a cube".to_string()]).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn misses_list_every_key() {
        let src = StoreSource::from_store(store(), "m", 224).unwrap();
        let err = src.texts(&["x".into(), "a cube".into(), "y".into()]).unwrap_err();
        match err {
            EmbedError::CacheMiss(keys) => assert_eq!(keys, vec![text_key("x"), text_key("y")]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn descriptor_dim_must_match() {
        let desc = EncoderDescriptor { model_name: "m".into(), embedding_dim: 3, layer: EncoderLayer::Last, input_side: 224 };
        assert!(matches!(StoreSource::new(store(), desc), Err(EmbedError::DimMismatch { .. })));
    }
}
