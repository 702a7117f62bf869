use compose_probe_core::embedding::{EmbeddingSource, ImageRef};
use compose_probe_core::eval::{CaptionInput, ScoreError, Scorer};

use crate::config::Variant;
use crate::data::{PairItem, Seq};
use crate::model::forward;
use crate::params::Params;
use crate::AlignError;

/// Inputs for one side of a pair as the model variant expects them.
pub fn image_input<S: EmbeddingSource + ?Sized>(source: &S, variant: Variant, image: &ImageRef) -> Result<Seq<f32>, AlignError> {
    let m = match variant {
        Variant::Local => source.image_patches(image)?,
        Variant::Global => source.image_global(image)?,
    };
    Ok(Seq::from_matrix(&m))
}

pub fn text_input<S: EmbeddingSource + ?Sized>(source: &S, variant: Variant, text: &str) -> Result<Seq<f32>, AlignError> {
    let m = match variant {
        Variant::Local => source.text_tokens(text)?,
        Variant::Global => source.texts(&[text.to_string()])?,
    };
    Ok(Seq::from_matrix(&m))
}

/// Training pairs from evaluator instances: (image, caption) is the
/// positive, (negative_image, negative_caption) its hard negative when the
/// instance has one.
pub fn pairs_from_instances<S: EmbeddingSource + ?Sized>(
    source: &S,
    variant: Variant,
    instances: &[compose_probe_core::eval::RetrievalInstance],
    image_root: Option<&std::path::Path>,
    with_negatives: bool,
) -> Result<Vec<PairItem<f32>>, AlignError> {
    instances
        .iter()
        .map(|inst| {
            let image = image_input(source, variant, &ImageRef::resolve(&inst.image, image_root))?;
            let text = text_input(source, variant, &inst.caption)?;
            let negative = match (&inst.negative_image, with_negatives) {
                (Some(neg), true) => Some((
                    image_input(source, variant, &ImageRef::resolve(neg, image_root))?,
                    text_input(source, variant, &inst.negative_caption)?,
                )),
                _ => None,
            };
            Ok(PairItem { image, text, negative })
        })
        .collect()
}

/// Scores pairs with a trained model over frozen encoder outputs.
pub struct TransformerScorer<S> {
    params: Params<f32>,
    source: S,
}

impl<S: EmbeddingSource> TransformerScorer<S> {
    pub fn new(params: Params<f32>, source: S) -> Self {
        Self { params, source }
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }
}

impl<S: EmbeddingSource> Scorer for TransformerScorer<S> {
    fn describe(&self) -> String {
        let c = self.params.config();
        let v = match c.variant {
            Variant::Local => "local",
            Variant::Global => "global",
        };
        format!("transformer[{v},layers={},d={}]", c.layers, c.model_dim)
    }

    fn score(&self, image: &ImageRef, caption: &CaptionInput<'_>) -> Result<f64, ScoreError> {
        let variant = self.params.config().variant;
        let img = image_input(&self.source, variant, image).map_err(ScoreError::new)?;
        let txt = text_input(&self.source, variant, caption.text).map_err(ScoreError::new)?;
        forward(&self.params, &img, &txt).map(f64::from).map_err(ScoreError::new)
    }
}
