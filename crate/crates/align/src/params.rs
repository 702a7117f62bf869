//! Flat parameter storage with a named tensor layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::TransformerConfig;
use crate::{AlignError, Scalar};

pub const INIT_STD: f64 = 0.02;
/// Initial log of the inverse softmax temperature, ln(1 / 0.07).
pub const INIT_LOGIT_SCALE: f64 = 2.659_260_036_932_778_4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Weight `[din, dout]` at `off`, bias `[dout]` right after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Lin {
    pub off: usize,
    pub din: usize,
    pub dout: usize,
}

impl Lin {
    pub fn len(&self) -> usize {
        self.din * self.dout + self.dout
    }
}

/// Gain `[d]` at `off`, bias `[d]` right after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Norm {
    pub off: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BlockLayout {
    pub ln1: Norm,
    pub qkv: Lin,
    pub out: Lin,
    pub ln2: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    total: usize,
    pub(crate) visual: Lin,
    pub(crate) text: Lin,
    pub(crate) visual_pos: usize,
    pub(crate) text_pos: usize,
    pub(crate) modality: usize,
    pub(crate) cls: usize,
    pub(crate) blocks: Vec<BlockLayout>,
    pub(crate) final_ln: Norm,
    pub(crate) head: Lin,
    pub(crate) logit_scale: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    next: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let off = self.next;
        self.next += shape.iter().product::<usize>();
        self.tensors.push(TensorSpec { name, shape, offset: off });
        off
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize) -> Lin {
        let off = self.push(format!("{name}.weight"), vec![din, dout]);
        self.push(format!("{name}.bias"), vec![dout]);
        Lin { off, din, dout }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let off = self.push(format!("{name}.weight"), vec![d]);
        self.push(format!("{name}.bias"), vec![d]);
        Norm { off, d }
    }
}

impl Layout {
    pub fn new(c: &TransformerConfig) -> Self {
        let d = c.model_dim;
        let mut b = Builder { tensors: Vec::new(), next: 0 };
        let visual = b.lin("visual_proj", c.visual_dim, d);
        let text = b.lin("text_proj", c.text_dim, d);
        let visual_pos = b.push("visual_pos".into(), vec![c.max_patches, d]);
        let text_pos = b.push("text_pos".into(), vec![c.max_tokens, d]);
        let modality = b.push("modality".into(), vec![2, d]);
        let cls = b.push("cls".into(), vec![d]);
        let blocks = (0..c.layers)
            .map(|l| BlockLayout {
                ln1: b.norm(&format!("blocks.{l}.ln1"), d),
                qkv: b.lin(&format!("blocks.{l}.qkv"), d, 3 * d),
                out: b.lin(&format!("blocks.{l}.attn_out"), d, d),
                ln2: b.norm(&format!("blocks.{l}.ln2"), d),
                ff1: b.lin(&format!("blocks.{l}.ff1"), d, c.ff_dim),
                ff2: b.lin(&format!("blocks.{l}.ff2"), c.ff_dim, d),
            })
            .collect();
        let final_ln = b.norm("final_ln", d);
        let head = b.lin("head", d, 1);
        let logit_scale = b.push("logit_scale".into(), vec![1]);
        Layout {
            total: b.next,
            tensors: b.tensors,
            visual,
            text,
            visual_pos,
            text_pos,
            modality,
            cls,
            blocks,
            final_ln,
            head,
            logit_scale,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Name of the tensor holding flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&str> {
        self.tensors.iter().find(|t| t.range().contains(&i)).map(|t| t.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    config: TransformerConfig,
    layout: Layout,
    data: Vec<F>,
}

impl<F: Scalar> Params<F> {
    /// Gaussian weights (std 0.02), zero biases, unit norm gains.
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self, AlignError> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut data = vec![F::zero(); layout.total()];
        for t in layout.tensors() {
            let name = t.name.as_str();
            let is_gain = name.ends_with("ln1.weight") || name.ends_with("ln2.weight") || name == "final_ln.weight";
            for v in &mut data[t.range()] {
                let x = if name == "logit_scale" {
                    INIT_LOGIT_SCALE
                } else if name.ends_with(".bias") {
                    0.0
                } else if is_gain {
                    1.0
                } else {
                    normal.sample(&mut rng)
                };
                *v = F::of(x);
            }
        }
        Ok(Self { config: config.clone(), layout, data })
    }

    pub fn from_data(config: &TransformerConfig, data: Vec<F>) -> Result<Self, AlignError> {
        config.validate()?;
        let layout = Layout::new(config);
        if data.len() != layout.total() {
            return Err(AlignError::Shape(format!("expected {} parameters, got {}", layout.total(), data.len())));
        }
        Ok(Self { config: config.clone(), layout, data })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout.tensor(name).map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let r = self.layout.tensor(name)?.range();
        Some(&mut self.data[r])
    }

    pub fn logit_scale(&self) -> F {
        self.data[self.layout.logit_scale]
    }

    pub fn zero_head(&mut self) {
        let h = self.layout.head;
        self.data[h.off..h.off + h.len()].iter_mut().for_each(|v| *v = F::zero());
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params { config: self.config.clone(), layout: self.layout.clone(), data: self.data.iter().map(|v| G::of(v.f64())).collect() }
    }

    pub(crate) fn slice(&self, off: usize, len: usize) -> &[F] {
        &self.data[off..off + len]
    }
}

/// Total number of learnable scalars, including the logit scale.
pub fn param_count<F>(params: &Params<F>) -> usize {
    params.data.len()
}

/// Parameter count implied by a config, without allocating.
pub fn config_param_count(config: &TransformerConfig) -> usize {
    Layout::new(config).total()
}
