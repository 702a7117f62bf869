use crate::AlignError;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// `d loss / d score`, row-major like the scores.
    pub d_scores: Vec<f64>,
    /// `d loss / d ln(1 / temperature)`.
    pub d_log_scale: f64,
}

fn check(scores: &[f64], n: usize, n_pos: usize, temperature: f64) -> Result<(), AlignError> {
    if scores.len() != n * n {
        return Err(AlignError::Shape(format!("contrastive loss needs a square matrix; got {} values for n = {n}", scores.len())));
    }
    if n_pos == 0 || n_pos > n {
        return Err(AlignError::Shape(format!("n_pos {n_pos} must be in 1..={n}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AlignError::Config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric cross-entropy over an `n x n` score matrix whose first `n_pos`
/// diagonal entries are the targets. Rows and columns beyond `n_pos` are
/// hard negatives: they appear in the other side's softmax but carry no
/// target of their own.
pub fn contrastive_loss(scores: &[f64], n: usize, n_pos: usize, temperature: f64) -> Result<f64, AlignError> {
    contrastive_loss_grad(scores, n, n_pos, temperature).map(|g| g.loss)
}

pub fn contrastive_loss_grad(scores: &[f64], n: usize, n_pos: usize, temperature: f64) -> Result<LossGrad, AlignError> {
    check(scores, n, n_pos, temperature)?;
    let logits: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let w = 0.5 / n_pos as f64;
    let mut loss = 0.0;
    let mut d_logits = vec![0.0; n * n];
    for i in 0..n_pos {
        let row = &logits[i * n..(i + 1) * n];
        let lse = log_sum_exp(row.iter().copied());
        loss += w * (lse - row[i]);
        for j in 0..n {
            d_logits[i * n + j] += w * (row[j] - lse).exp();
        }
        d_logits[i * n + i] -= w;
    }
    for j in 0..n_pos {
        let col = (0..n).map(|i| logits[i * n + j]);
        let lse = log_sum_exp(col);
        loss += w * (lse - logits[j * n + j]);
        for i in 0..n {
            d_logits[i * n + j] += w * (logits[i * n + j] - lse).exp();
        }
        d_logits[j * n + j] -= w;
    }
    let d_log_scale = d_logits.iter().zip(&logits).map(|(g, l)| g * l).sum();
    let d_scores = d_logits.into_iter().map(|g| g / temperature).collect();
    Ok(LossGrad { loss, d_scores, d_log_scale })
}

/// Fraction of the first `n_pos` rows whose diagonal strictly beats every
/// other entry in the row; ties count as misses.
pub fn batch_accuracy(scores: &[f64], n_cols: usize, n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let hits = (0..n_pos)
        .filter(|&i| {
            let row = &scores[i * n_cols..(i + 1) * n_cols];
            (0..n_cols).all(|j| j == i || row[i] > row[j])
        })
        .count();
    hits as f64 / n_pos as f64
}
