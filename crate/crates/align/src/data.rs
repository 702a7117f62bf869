use compose_probe_core::embedding::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{TransformerConfig, Variant};
use crate::{AlignError, Scalar};

/// A frozen input sequence; rows with `mask == false` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq<F> {
    rows: usize,
    dim: usize,
    data: Vec<F>,
    mask: Vec<bool>,
}

impl<F: Scalar> Seq<F> {
    pub fn new(rows: usize, dim: usize, data: Vec<F>) -> Result<Self, AlignError> {
        if data.len() != rows * dim {
            return Err(AlignError::Shape(format!("{rows}x{dim} sequence needs {} values, got {}", rows * dim, data.len())));
        }
        Ok(Self { rows, dim, data, mask: vec![true; rows] })
    }

    pub fn from_matrix(m: &EmbeddingMatrix) -> Self {
        let data = m.data().iter().map(|&v| F::of(f64::from(v))).collect();
        Self { rows: m.rows(), dim: m.dim(), data, mask: vec![true; m.rows()] }
    }

    /// Appends masked rows holding `values` (a multiple of `dim` long).
    pub fn pad_with(mut self, values: &[F]) -> Result<Self, AlignError> {
        if values.len() % self.dim != 0 {
            return Err(AlignError::Shape(format!("padding of {} values is not a multiple of {}", values.len(), self.dim)));
        }
        let extra = values.len() / self.dim;
        self.data.extend_from_slice(values);
        self.mask.extend(std::iter::repeat_n(false, extra));
        self.rows += extra;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn cast<G: Scalar>(&self) -> Seq<G> {
        Seq { rows: self.rows, dim: self.dim, data: self.data.iter().map(|v| G::of(v.f64())).collect(), mask: self.mask.clone() }
    }
}

/// Images index rows of the score matrix, texts index columns. The first
/// `n_pos` of each are matched pairs; any further entries are hard negatives
/// with no target of their own.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub images: Vec<Seq<F>>,
    pub texts: Vec<Seq<F>>,
    pub n_pos: usize,
}

impl<F: Scalar> Batch<F> {
    pub fn paired(images: Vec<Seq<F>>, texts: Vec<Seq<F>>) -> Self {
        let n_pos = images.len().min(texts.len());
        Self { images, texts, n_pos }
    }

    pub fn from_items(items: &[&PairItem<F>]) -> Self {
        let mut images: Vec<Seq<F>> = items.iter().map(|p| p.image.clone()).collect();
        let mut texts: Vec<Seq<F>> = items.iter().map(|p| p.text.clone()).collect();
        for p in items {
            if let Some((img, txt)) = &p.negative {
                images.push(img.clone());
                texts.push(txt.clone());
            }
        }
        Self { images, texts, n_pos: items.len() }
    }

    pub fn cast<G: Scalar>(&self) -> Batch<G> {
        Batch {
            images: self.images.iter().map(Seq::cast).collect(),
            texts: self.texts.iter().map(Seq::cast).collect(),
            n_pos: self.n_pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairItem<F> {
    pub image: Seq<F>,
    pub text: Seq<F>,
    /// Hard-negative (image, text) pair that travels with this item.
    pub negative: Option<(Seq<F>, Seq<F>)>,
}

/// Matched pairs whose inputs are separable by construction: every pair
/// owns a random latent code that both modalities express through fixed
/// random maps, plus small noise.
pub fn synthetic_pairs<F: Scalar>(config: &TransformerConfig, n: usize, seed: u64) -> Vec<PairItem<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = 8;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let map = |out: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..latent * out).map(|_| normal.sample(rng) / (latent as f64).sqrt()).collect()
    };
    let vis_map = map(config.visual_dim, &mut rng);
    let txt_map = map(config.text_dim, &mut rng);
    let project = |code: &[f64], m: &[f64], out: usize| -> Vec<f64> {
        (0..out).map(|o| (0..latent).map(|k| code[k] * m[k * out + o]).sum()).collect()
    };
    let (max_p, max_t) = match config.variant {
        Variant::Local => (config.max_patches.min(4), config.max_tokens.min(4)),
        Variant::Global => (1, 1),
    };
    (0..n)
        .map(|_| {
            let code: Vec<f64> = (0..latent).map(|_| normal.sample(&mut rng)).collect();
            let seq = |rows: usize, dim: usize, m: &[f64], rng: &mut ChaCha8Rng| {
                let base = project(&code, m, dim);
                let data = (0..rows).flat_map(|_| base.iter().map(|&b| F::of(b + 0.05 * normal.sample(rng))).collect::<Vec<_>>()).collect();
                Seq::new(rows, dim, data).expect("consistent synthetic shape")
            };
            let p = rng.random_range(1..=max_p);
            let t = rng.random_range(1..=max_t);
            let image = seq(p, config.visual_dim, &vis_map, &mut rng);
            let text = seq(t, config.text_dim, &txt_map, &mut rng);
            PairItem { image, text, negative: None }
        })
        .collect()
}
