use serde::{Deserialize, Serialize};

use crate::AlignError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Patch and token sequences.
    Local,
    /// One pooled vector per modality.
    Global,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(Variant::Local),
            "global" => Ok(Variant::Global),
            _ => Err(format!("unknown variant {s:?} (expected local or global)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub variant: Variant,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_patches: usize,
    pub max_tokens: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
}

/// ViT-B/32 penultimate hidden widths and sequence lengths.
pub const CLIP_B32_VISUAL_DIM: usize = 768;
pub const CLIP_B32_TEXT_DIM: usize = 512;
pub const CLIP_B32_PATCHES: usize = 50;
pub const CLIP_B32_TOKENS: usize = 77;
pub const CLIP_B32_EMBED_DIM: usize = 512;

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::local(CLIP_B32_VISUAL_DIM, CLIP_B32_TEXT_DIM, CLIP_B32_PATCHES, CLIP_B32_TOKENS)
    }
}

impl TransformerConfig {
    pub fn local(visual_dim: usize, text_dim: usize, max_patches: usize, max_tokens: usize) -> Self {
        Self {
            variant: Variant::Local,
            layers: 4,
            model_dim: 512,
            heads: 8,
            ff_dim: 2048,
            max_patches,
            max_tokens,
            visual_dim,
            text_dim,
        }
    }

    pub fn global(visual_dim: usize, text_dim: usize) -> Self {
        Self { variant: Variant::Global, max_patches: 1, max_tokens: 1, ..Self::local(visual_dim, text_dim, 1, 1) }
    }

    pub fn with_shape(mut self, layers: usize, model_dim: usize, heads: usize, ff_dim: usize) -> Self {
        self.layers = layers;
        self.model_dim = model_dim;
        self.heads = heads;
        self.ff_dim = ff_dim;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |m: String| Err(AlignError::Config(m));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} is not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.ff_dim == 0 || self.visual_dim == 0 || self.text_dim == 0 {
            return bad("ff_dim, visual_dim and text_dim must be positive".into());
        }
        if self.max_patches == 0 || self.max_tokens == 0 {
            return bad("max_patches and max_tokens must be positive".into());
        }
        if self.variant == Variant::Global && (self.max_patches != 1 || self.max_tokens != 1) {
            return bad("the global variant takes exactly one vector per modality".into());
        }
        Ok(())
    }
}
