use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, PairItem};
use crate::loss::{batch_accuracy, contrastive_loss_grad};
use crate::model::{pair_gradient, score_matrix};
use crate::optim::{adamw_step, cosine_schedule, AdamWConfig, AdamWState};
use crate::params::Params;
use crate::{AlignError, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub warmup_frac: f64,
    /// Positive pairs per batch; hard negatives ride along with their items.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validate every this many steps; `None` validates once per epoch.
    pub eval_every: Option<usize>,
    pub freeze_temperature: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            optimizer: AdamWConfig::default(),
            warmup_frac: 0.1,
            batch_size: 50,
            epochs: 5,
            seed: 0,
            eval_every: None,
            freeze_temperature: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(AlignError::Config(format!("warmup fraction must be in (0, 1), got {}", self.warmup_frac)));
        }
        if self.batch_size < 2 {
            return Err(AlignError::Config("the contrastive objective needs batches of at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(AlignError::Config("epochs must be at least 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(AlignError::Config("eval_every must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(AlignError::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradOutput {
    pub loss: f64,
    /// Raw head outputs, images as rows.
    pub scores: Vec<f64>,
    pub grads: Vec<f64>,
}

/// Loss and exact gradient for one batch. Per-pair gradients are computed
/// in parallel and summed in pair order at f64, so the result does not
/// depend on the thread count.
pub fn grad<F: Scalar>(params: &Params<F>, batch: &Batch<F>, freeze_temperature: bool) -> Result<GradOutput, AlignError> {
    let n = batch.images.len();
    if batch.texts.len() != n {
        return Err(AlignError::Shape(format!("{} images but {} texts", n, batch.texts.len())));
    }
    let scores: Vec<f64> = score_matrix(params, &batch.images, &batch.texts)?.into_iter().map(Scalar::f64).collect();
    let temperature = (-params.logit_scale().f64()).exp();
    let lg = contrastive_loss_grad(&scores, n, batch.n_pos, temperature)?;

    let total = params.data().len();
    let mut acc = vec![0.0f64; total];
    let chunk = rayon::current_num_threads().clamp(1, 8);
    let pairs: Vec<usize> = (0..n * n).collect();
    for group in pairs.chunks(chunk) {
        let parts: Vec<Result<Vec<F>, AlignError>> = group
            .par_iter()
            .map(|&k| {
                let mut g = vec![F::zero(); total];
                pair_gradient(params, &batch.images[k / n], &batch.texts[k % n], &mut g)?;
                Ok(g)
            })
            .collect();
        for (&k, part) in group.iter().zip(parts) {
            let w = lg.d_scores[k];
            for (a, g) in acc.iter_mut().zip(part?) {
                *a += w * g.f64();
            }
        }
    }
    let ls = params.layout().logit_scale;
    acc[ls] = if freeze_temperature { 0.0 } else { lg.d_log_scale };
    if let Some(i) = acc.iter().position(|g| !g.is_finite()) {
        let tensor = params.layout().owner(i).unwrap_or("?").to_string();
        return Err(AlignError::NonFiniteGradient { tensor });
    }
    Ok(GradOutput { loss: lg.loss, scores, grads: acc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    /// Parameters at the best validation accuracy (first reached).
    pub best: Params<F>,
    pub last: Params<F>,
    pub best_accuracy: f64,
    pub best_step: usize,
    pub history: Vec<HistoryRow>,
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
    }
    out
}

/// Mean batch accuracy over the validation set in fixed order.
pub fn validation_accuracy<F: Scalar>(params: &Params<F>, data: &[PairItem<F>], batch_size: usize) -> Result<f64, AlignError> {
    let mut hits = 0.0;
    let mut rows = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let items: Vec<&PairItem<F>> = chunk.iter().collect();
        let batch = Batch::from_items(&items);
        let scores: Vec<f64> = score_matrix(params, &batch.images, &batch.texts)?.into_iter().map(Scalar::f64).collect();
        hits += batch_accuracy(&scores, batch.texts.len(), batch.n_pos) * batch.n_pos as f64;
        rows += batch.n_pos;
    }
    Ok(if rows == 0 { 0.0 } else { hits / rows as f64 })
}

pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    init: Params<F>,
    train_data: &[PairItem<F>],
    val_data: &[PairItem<F>],
) -> Result<TrainOutcome<F>, AlignError> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(AlignError::Config("training and validation data must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = batches(train_data.len(), cfg.batch_size, &mut rng.clone()).len();
    let total = per_epoch * cfg.epochs;
    let frozen: Vec<usize> = if cfg.freeze_temperature { vec![init.layout().logit_scale] } else { Vec::new() };

    let mut params = init;
    let mut state = AdamWState::new(params.data().len());
    let mut history = Vec::with_capacity(total);
    let mut best = params.clone();
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let plan = batches(train_data.len(), cfg.batch_size, &mut rng);
        for (b, idx) in plan.iter().enumerate() {
            let items: Vec<&PairItem<F>> = idx.iter().map(|&i| &train_data[i]).collect();
            let batch = Batch::from_items(&items);
            let out = grad(&params, &batch, cfg.freeze_temperature)?;
            let lr = cfg.lr * cosine_schedule(step, total, cfg.warmup_frac);
            adamw_step(params.data_mut(), &out.grads, &mut state, lr, &cfg.optimizer, &frozen);
            step += 1;

            let due = match cfg.eval_every {
                Some(k) => step % k == 0 || step == total,
                None => b + 1 == plan.len(),
            };
            let val_accuracy = if due { Some(validation_accuracy(&params, val_data, cfg.batch_size)?) } else { None };
            if let Some(acc) = val_accuracy {
                log::debug!("step {step}: loss {:.4} val acc {acc:.3}", out.loss);
                if acc > best_accuracy {
                    best_accuracy = acc;
                    best_step = step;
                    best = params.clone();
                }
            }
            history.push(HistoryRow { step, epoch: epoch + 1, lr, loss: out.loss, val_accuracy });
        }
    }
    Ok(TrainOutcome { best, last: params, best_accuracy, best_step, history })
}

/// `step,epoch,lr,loss,val_accuracy` with an empty accuracy cell on steps
/// without validation.
pub fn history_csv(history: &[HistoryRow]) -> Result<String, AlignError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in history {
        w.serialize(row).map_err(|e| AlignError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| AlignError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| AlignError::Format(e.to_string()))
}
