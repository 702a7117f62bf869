//! Forward pass over `[CLS | visual | textual]` and its reverse-mode gradient.

use rayon::prelude::*;

use crate::data::Seq;
use crate::params::{BlockLayout, Lin, Norm, Params};
use crate::{AlignError, Scalar};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

/// `y = x W + b` for `n` rows.
fn linear<F: Scalar>(params: &Params<F>, lin: Lin, x: &[F], n: usize) -> Vec<F> {
    let w = params.slice(lin.off, lin.din * lin.dout);
    let b = params.slice(lin.off + lin.din * lin.dout, lin.dout);
    let mut y = Vec::with_capacity(n * lin.dout);
    for r in 0..n {
        y.extend_from_slice(b);
        let out = &mut y[r * lin.dout..];
        for (i, &xi) in x[r * lin.din..(r + 1) * lin.din].iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&w[i * lin.dout..(i + 1) * lin.dout]) {
                *o = *o + xi * wv;
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients; returns `dx`.
fn linear_backward<F: Scalar>(params: &Params<F>, lin: Lin, x: &[F], dy: &[F], n: usize, grad: &mut [F]) -> Vec<F> {
    let w = params.slice(lin.off, lin.din * lin.dout);
    let (gw, gb) = grad[lin.off..lin.off + lin.len()].split_at_mut(lin.din * lin.dout);
    let mut dx = vec![F::zero(); n * lin.din];
    for r in 0..n {
        let dyr = &dy[r * lin.dout..(r + 1) * lin.dout];
        if dyr.iter().all(|v| v.is_zero()) {
            continue;
        }
        for (g, &d) in gb.iter_mut().zip(dyr) {
            *g = *g + d;
        }
        for i in 0..lin.din {
            let xi = x[r * lin.din + i];
            let wrow = &w[i * lin.dout..(i + 1) * lin.dout];
            let grow = &mut gw[i * lin.dout..(i + 1) * lin.dout];
            let mut acc = F::zero();
            for o in 0..lin.dout {
                grow[o] = grow[o] + xi * dyr[o];
                acc = acc + dyr[o] * wrow[o];
            }
            dx[r * lin.din + i] = acc;
        }
    }
    dx
}

struct NormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

fn layer_norm<F: Scalar>(params: &Params<F>, norm: Norm, x: &[F], n: usize) -> (Vec<F>, NormCache<F>) {
    let d = norm.d;
    let g = params.slice(norm.off, d);
    let b = params.slice(norm.off + d, d);
    let inv_d = F::one() / F::of(d as f64);
    let mut y = vec![F::zero(); n * d];
    let mut xhat = vec![F::zero(); n * d];
    let mut rstd = vec![F::zero(); n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        for k in 0..d {
            let h = (row[k] - mean) * rs;
            xhat[r * d + k] = h;
            y[r * d + k] = g[k] * h + b[k];
        }
        rstd[r] = rs;
    }
    (y, NormCache { xhat, rstd })
}

/// Adds the input gradient into `dx`.
fn layer_norm_backward<F: Scalar>(
    params: &Params<F>,
    norm: Norm,
    cache: &NormCache<F>,
    dy: &[F],
    n: usize,
    dx: &mut [F],
    grad: &mut [F],
) {
    let d = norm.d;
    let g = params.slice(norm.off, d);
    let (gg, gb) = grad[norm.off..norm.off + 2 * d].split_at_mut(d);
    let inv_d = F::one() / F::of(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        if dyr.iter().all(|v| v.is_zero()) {
            continue;
        }
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for k in 0..d {
            gg[k] = gg[k] + dyr[k] * xh[k];
            gb[k] = gb[k] + dyr[k];
            dxhat[k] = dyr[k] * g[k];
            m1 = m1 + dxhat[k];
            m2 = m2 + dxhat[k] * xh[k];
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        for k in 0..d {
            dx[r * d + k] = dx[r * d + k] + cache.rstd[r] * (dxhat[k] - m1 - xh[k] * m2);
        }
    }
}

struct BlockCache<F> {
    ln1: NormCache<F>,
    a: Vec<F>,
    qkv: Vec<F>,
    /// `[head][query][key]`, zero at masked keys.
    probs: Vec<F>,
    o: Vec<F>,
    ln2: NormCache<F>,
    b: Vec<F>,
    u: Vec<F>,
    act: Vec<F>,
}

struct Cache<F> {
    n: usize,
    blocks: Vec<BlockCache<F>>,
    final_ln: NormCache<F>,
    z: Vec<F>,
}

fn attention<F: Scalar>(qkv: &[F], n: usize, d: usize, heads: usize, mask: &[bool]) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut probs = vec![F::zero(); heads * n * n];
    let mut o = vec![F::zero(); n * d];
    let keys: Vec<usize> = (0..n).filter(|&c| mask[c]).collect();
    for h in 0..heads {
        for r in 0..n {
            let q = &qkv[r * 3 * d + h * dh..][..dh];
            let p = &mut probs[(h * n + r) * n..(h * n + r + 1) * n];
            let mut max = F::neg_infinity();
            for &c in &keys {
                let k = &qkv[c * 3 * d + d + h * dh..][..dh];
                let s = q.iter().zip(k).fold(F::zero(), |a, (&x, &y)| a + x * y) * scale;
                p[c] = s;
                max = max.max(s);
            }
            let mut sum = F::zero();
            for &c in &keys {
                p[c] = (p[c] - max).exp();
                sum = sum + p[c];
            }
            let out = &mut o[r * d + h * dh..][..dh];
            for &c in &keys {
                p[c] = p[c] / sum;
                let v = &qkv[c * 3 * d + 2 * d + h * dh..][..dh];
                for (ov, &vv) in out.iter_mut().zip(v) {
                    *ov = *ov + p[c] * vv;
                }
            }
        }
    }
    (o, probs)
}

fn attention_backward<F: Scalar>(
    dout: &[F],
    qkv: &[F],
    probs: &[F],
    n: usize,
    d: usize,
    heads: usize,
    mask: &[bool],
) -> Vec<F> {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut dqkv = vec![F::zero(); n * 3 * d];
    let keys: Vec<usize> = (0..n).filter(|&c| mask[c]).collect();
    let mut dp = vec![F::zero(); n];
    for h in 0..heads {
        for r in 0..n {
            let dor = &dout[r * d + h * dh..][..dh];
            if dor.iter().all(|v| v.is_zero()) {
                continue;
            }
            let p = &probs[(h * n + r) * n..(h * n + r + 1) * n];
            let mut dot = F::zero();
            for &c in &keys {
                let v = &qkv[c * 3 * d + 2 * d + h * dh..][..dh];
                dp[c] = dor.iter().zip(v).fold(F::zero(), |a, (&x, &y)| a + x * y);
                dot = dot + p[c] * dp[c];
                for k in 0..dh {
                    let i = c * 3 * d + 2 * d + h * dh + k;
                    dqkv[i] = dqkv[i] + p[c] * dor[k];
                }
            }
            for &c in &keys {
                let ds = p[c] * (dp[c] - dot) * scale;
                for k in 0..dh {
                    let qi = r * 3 * d + h * dh + k;
                    let ki = c * 3 * d + d + h * dh + k;
                    dqkv[qi] = dqkv[qi] + ds * qkv[ki];
                    dqkv[ki] = dqkv[ki] + ds * qkv[qi];
                }
            }
        }
    }
    dqkv
}

fn check_inputs<F: Scalar>(params: &Params<F>, image: &Seq<F>, text: &Seq<F>) -> Result<(), AlignError> {
    let c = params.config();
    if image.dim() != c.visual_dim || text.dim() != c.text_dim {
        return Err(AlignError::Shape(format!(
            "input widths ({}, {}) do not match the model's ({}, {})",
            image.dim(),
            text.dim(),
            c.visual_dim,
            c.text_dim
        )));
    }
    if image.rows() > c.max_patches || text.rows() > c.max_tokens {
        return Err(AlignError::Shape(format!(
            "sequence lengths ({}, {}) exceed the model's maxima ({}, {})",
            image.rows(),
            text.rows(),
            c.max_patches,
            c.max_tokens
        )));
    }
    Ok(())
}

fn ensure_finite<F: Scalar>(x: &[F], layer: usize) -> Result<(), AlignError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AlignError::NonFinite { layer })
    }
}

fn embed<F: Scalar>(params: &Params<F>, image: &Seq<F>, text: &Seq<F>) -> Vec<F> {
    let lay = params.layout();
    let d = params.config().model_dim;
    let mut x = Vec::with_capacity((1 + image.rows() + text.rows()) * d);
    x.extend_from_slice(params.slice(lay.cls, d));
    for (seq, lin, pos, m) in [(image, lay.visual, lay.visual_pos, 0), (text, lay.text, lay.text_pos, 1)] {
        let proj = linear(params, lin, seq.data(), seq.rows());
        let modality = params.slice(lay.modality + m * d, d);
        for r in 0..seq.rows() {
            let p = params.slice(pos + r * d, d);
            for k in 0..d {
                x.push(proj[r * d + k] + p[k] + modality[k]);
            }
        }
    }
    x
}

fn block_forward<F: Scalar>(
    params: &Params<F>,
    blk: &BlockLayout,
    x: &[F],
    n: usize,
    mask: &[bool],
) -> (Vec<F>, BlockCache<F>) {
    let c = params.config();
    let d = c.model_dim;
    let (a, ln1) = layer_norm(params, blk.ln1, x, n);
    let qkv = linear(params, blk.qkv, &a, n);
    let (o, probs) = attention(&qkv, n, d, c.heads, mask);
    let attn = linear(params, blk.out, &o, n);
    let hres: Vec<F> = x.iter().zip(&attn).map(|(&p, &q)| p + q).collect();
    let (b, ln2) = layer_norm(params, blk.ln2, &hres, n);
    let u = linear(params, blk.ff1, &b, n);
    let act: Vec<F> = u.iter().map(|&v| gelu(v)).collect();
    let f = linear(params, blk.ff2, &act, n);
    let out = hres.iter().zip(&f).map(|(&p, &q)| p + q).collect();
    (out, BlockCache { ln1, a, qkv, probs, o, ln2, b, u, act })
}

fn block_backward<F: Scalar>(
    params: &Params<F>,
    blk: &BlockLayout,
    cache: &BlockCache<F>,
    dx_next: &[F],
    n: usize,
    mask: &[bool],
    grad: &mut [F],
) -> Vec<F> {
    let c = params.config();
    let d = c.model_dim;
    let dact = linear_backward(params, blk.ff2, &cache.act, dx_next, n, grad);
    let du: Vec<F> = dact.iter().zip(&cache.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
    let db = linear_backward(params, blk.ff1, &cache.b, &du, n, grad);
    let mut dh = dx_next.to_vec();
    layer_norm_backward(params, blk.ln2, &cache.ln2, &db, n, &mut dh, grad);
    let d_o = linear_backward(params, blk.out, &cache.o, &dh, n, grad);
    let dqkv = attention_backward(&d_o, &cache.qkv, &cache.probs, n, d, c.heads, mask);
    let da = linear_backward(params, blk.qkv, &cache.a, &dqkv, n, grad);
    let mut dx = dh;
    layer_norm_backward(params, blk.ln1, &cache.ln1, &da, n, &mut dx, grad);
    dx
}

fn forward_cached<F: Scalar>(params: &Params<F>, image: &Seq<F>, text: &Seq<F>) -> Result<(F, Cache<F>), AlignError> {
    check_inputs(params, image, text)?;
    let lay = params.layout();
    let d = params.config().model_dim;
    let n = 1 + image.rows() + text.rows();
    let mut mask = Vec::with_capacity(n);
    mask.push(true);
    mask.extend_from_slice(image.mask());
    mask.extend_from_slice(text.mask());

    let mut x = embed(params, image, text);
    ensure_finite(&x, 0)?;
    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for (l, blk) in lay.blocks.iter().enumerate() {
        let (next, cache) = block_forward(params, blk, &x, n, &mask);
        ensure_finite(&next, l + 1)?;
        blocks.push(cache);
        x = next;
    }
    let (z, final_ln) = layer_norm(params, lay.final_ln, &x[..d], 1);
    let w = params.slice(lay.head.off, d);
    let bias = params.slice(lay.head.off + d, 1)[0];
    let score = z.iter().zip(w).fold(bias, |a, (&zv, &wv)| a + zv * wv);
    if !score.is_finite() {
        return Err(AlignError::NonFinite { layer: lay.blocks.len() + 1 });
    }
    Ok((score, Cache { n, blocks, final_ln, z }))
}

/// Matching score for one (image, text) pair.
///
/// Non-finite activations are reported by layer: 0 is the input embedding,
/// `l` is block `l - 1`'s output and `layers + 1` is the score head.
pub fn forward<F: Scalar>(params: &Params<F>, image: &Seq<F>, text: &Seq<F>) -> Result<F, AlignError> {
    forward_cached(params, image, text).map(|(s, _)| s)
}

/// Score and `d score / d params` for one pair, written into `grad`
/// (which must be zeroed and as long as the parameter vector).
pub(crate) fn pair_gradient<F: Scalar>(
    params: &Params<F>,
    image: &Seq<F>,
    text: &Seq<F>,
    grad: &mut [F],
) -> Result<F, AlignError> {
    let (score, cache) = forward_cached(params, image, text)?;
    let lay = params.layout();
    let d = params.config().model_dim;
    let n = cache.n;
    let mut mask = Vec::with_capacity(n);
    mask.push(true);
    mask.extend_from_slice(image.mask());
    mask.extend_from_slice(text.mask());

    let w = params.slice(lay.head.off, d);
    for k in 0..d {
        grad[lay.head.off + k] = grad[lay.head.off + k] + cache.z[k];
    }
    grad[lay.head.off + d] = grad[lay.head.off + d] + F::one();
    let mut dx = vec![F::zero(); n * d];
    layer_norm_backward(params, lay.final_ln, &cache.final_ln, w, 1, &mut dx[..d], grad);

    for (blk, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
        dx = block_backward(params, blk, bc, &dx, n, &mask, grad);
    }

    for k in 0..d {
        grad[lay.cls + k] = grad[lay.cls + k] + dx[k];
    }
    let mut row = 1;
    for (seq, lin, pos, m) in [(image, lay.visual, lay.visual_pos, 0), (text, lay.text, lay.text_pos, 1)] {
        let dproj = &dx[row * d..(row + seq.rows()) * d];
        linear_backward(params, lin, seq.data(), dproj, seq.rows(), grad);
        for r in 0..seq.rows() {
            for k in 0..d {
                let g = dproj[r * d + k];
                grad[pos + r * d + k] = grad[pos + r * d + k] + g;
                grad[lay.modality + m * d + k] = grad[lay.modality + m * d + k] + g;
            }
        }
        row += seq.rows();
    }
    Ok(score)
}

/// Scores every (image, text) pair; row-major with images as rows.
pub fn score_matrix<F: Scalar>(params: &Params<F>, images: &[Seq<F>], texts: &[Seq<F>]) -> Result<Vec<F>, AlignError> {
    if images.is_empty() || texts.is_empty() {
        return Err(AlignError::Shape("score matrix needs at least one image and one text".into()));
    }
    let cols = texts.len();
    (0..images.len() * cols).into_par_iter().map(|k| forward(params, &images[k / cols], &texts[k % cols])).collect()
}
