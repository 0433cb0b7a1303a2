//! Diagonal ground truth, weighted MSE loss and hand-derived gradients.

use ndarray::{s, Array1, Array2, Axis};

use super::forward::{forward, ForwardCache, LayerNormCache};
use super::train::{Label, TrainingSample};
use super::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};

/// Per-cell weights of the loss: `one` on ground-truth ones, `zero` elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub zero: f64,
    pub one: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { zero: 0.1, one: 1.1 }
    }
}

/// `T × M` target with ones at `(s_q + i, s_r + i)` for `i < len`, zeros elsewhere.
pub fn gt_matrix(t: usize, m: usize, s_q: usize, s_r: usize, len: usize) -> Result<Array2<f64>> {
    if len == 0 || s_q + len > t || s_r + len > m {
        return Err(Error::InvalidArgument(format!(
            "copy (s_q={s_q}, s_r={s_r}, L={len}) does not fit a {t}x{m} matrix"
        )));
    }
    let mut gt = Array2::zeros((t, m));
    for i in 0..len {
        gt[[s_q + i, s_r + i]] = 1.0;
    }
    Ok(gt)
}

/// `(1 / MT) Σ ((P − P_GT) · w)²`, with the weight inside the square.
pub fn weighted_mse_loss(p: &Array2<f64>, gt: &Array2<f64>, weights: LossWeights) -> Result<f64> {
    if p.dim() != gt.dim() {
        return Err(Error::Dimension(format!(
            "similarity {:?} vs ground truth {:?}",
            p.dim(),
            gt.dim()
        )));
    }
    let sum: f64 = p
        .iter()
        .zip(gt)
        .map(|(&x, &g)| {
            let w = if g == 1.0 { weights.one } else { weights.zero };
            let r = (x - g) * w;
            r * r
        })
        .sum();
    Ok(sum / p.len() as f64)
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let centered = dxhat
        - &mean_dxhat.insert_axis(Axis(1))
        - &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
    centered * cache.inv_std.view().insert_axis(Axis(1))
}

/// Accumulates `∂loss/∂weights` into `grads` given `∂loss/∂output` of one forward pass.
pub(super) fn backward(
    cache: &ForwardCache,
    d_out: &Array2<f64>,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    grads: &mut EncoderWeights,
) {
    // out = y2 / |y2|
    let along = (d_out * &cache.out).sum_axis(Axis(1));
    let d_y2 = (d_out - &(&cache.out * &along.insert_axis(Axis(1))))
        / cache.norms.view().insert_axis(Axis(1));

    let d_u2 = layer_norm_backward(&d_y2, &cache.ln2, &w.ln2_gain, &mut grads.ln2_gain, &mut grads.ln2_bias);

    // u2 = y1 + relu(y1 W1 + b1) W2 + b2
    grads.ffn_w2 += &cache.hidden.t().dot(&d_u2);
    grads.ffn_b2 += &d_u2.sum_axis(Axis(0));
    let mut d_hidden = d_u2.dot(&w.ffn_w2.t());
    d_hidden.zip_mut_with(&cache.hidden_pre, |g, &pre| {
        if pre <= 0.0 {
            *g = 0.0;
        }
    });
    grads.ffn_w1 += &cache.y1.t().dot(&d_hidden);
    grads.ffn_b1 += &d_hidden.sum_axis(Axis(0));
    let d_y1 = d_u2 + d_hidden.dot(&w.ffn_w1.t());

    let d_u1 = layer_norm_backward(&d_y1, &cache.ln1, &w.ln1_gain, &mut grads.ln1_gain, &mut grads.ln1_bias);

    // u1 = x + concat W_O
    grads.w_o += &cache.concat.t().dot(&d_u1);
    let d_concat = d_u1.dot(&w.w_o.t());

    let dk = cfg.d_k();
    let scale = 1.0 / (dk as f64).sqrt();
    for (i, h) in cache.heads.iter().enumerate() {
        let d_o = d_concat.slice(s![.., i * dk..(i + 1) * dk]);
        let d_attn = d_o.dot(&h.v.t());
        let d_v = h.attn.t().dot(&d_o);
        let row_dot = (&d_attn * &h.attn).sum_axis(Axis(1));
        let d_scores = &h.attn * &(d_attn - &row_dot.insert_axis(Axis(1))) * scale;
        let d_q = d_scores.dot(&h.k);
        let d_k = d_scores.t().dot(&h.q);
        let g = &mut grads.heads[i];
        g.w_q += &cache.x.t().dot(&d_q);
        g.w_k += &cache.x.t().dot(&d_k);
        g.w_v += &cache.x.t().dot(&d_v);
    }
}

/// Loss of `encode(Q)·encode(R)ᵀ` against the sample's ground truth, and its gradient
/// with respect to every weight.
pub fn loss_gradient(
    sample: &TrainingSample,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    weights: LossWeights,
) -> Result<(f64, EncoderWeights)> {
    let mut grads = EncoderWeights::zeros(cfg);
    let loss = accumulate_gradient(sample, w, cfg, weights, 1.0, &mut grads)?;
    Ok((loss, grads))
}

/// Adds `scale · ∂loss/∂w` into `grads` and returns the unscaled loss.
pub(super) fn accumulate_gradient(
    sample: &TrainingSample,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    weights: LossWeights,
    scale: f64,
    grads: &mut EncoderWeights,
) -> Result<f64> {
    let fq = forward(&sample.query, w, cfg)?;
    let fr = forward(&sample.reference, w, cfg)?;
    let p = fq.out.dot(&fr.out.t());
    let gt = sample.ground_truth()?;
    let loss = weighted_mse_loss(&p, &gt, weights)?;

    let n = p.len() as f64;
    let mut d_p = &p - &gt;
    d_p.zip_mut_with(&gt, |r, &g| {
        let wt = if g == 1.0 { weights.one } else { weights.zero };
        *r *= 2.0 * wt * wt * scale / n;
    });
    let d_q = d_p.dot(&fr.out);
    let d_r = d_p.t().dot(&fq.out);
    backward(&fq, &d_q, w, cfg, grads);
    backward(&fr, &d_r, w, cfg, grads);
    Ok(loss)
}

impl TrainingSample {
    pub fn ground_truth(&self) -> Result<Array2<f64>> {
        let (t, m) = (self.query.nrows(), self.reference.nrows());
        match self.label {
            Label::Positive { s_q, s_r, len } => gt_matrix(t, m, s_q, s_r, len),
            Label::Negative => Ok(Array2::zeros((t, m))),
        }
    }
}
