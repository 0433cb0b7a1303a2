use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};

pub(super) struct HeadCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Row-stochastic attention matrix.
    pub attn: Array2<f64>,
}

pub(super) struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub(super) struct ForwardCache {
    pub x: Array2<f64>,
    pub heads: Vec<HeadCache>,
    pub concat: Array2<f64>,
    pub ln1: LayerNormCache,
    pub y1: Array2<f64>,
    pub hidden_pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub ln2: LayerNormCache,
    pub norms: Array1<f64>,
    pub out: Array2<f64>,
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

fn head_forward(
    x: ArrayView2<f64>,
    w_q: &Array2<f64>,
    w_k: &Array2<f64>,
    w_v: &Array2<f64>,
) -> HeadCache {
    let q = x.dot(w_q);
    let k = x.dot(w_k);
    let v = x.dot(w_v);
    let scale = 1.0 / (w_q.ncols() as f64).sqrt();
    let mut attn = q.dot(&k.t()) * scale;
    softmax_rows(&mut attn);
    HeadCache { q, k, v, attn }
}

/// Scaled dot-product self-attention of one head: `softmax(QKᵀ/√d_k)·V`
/// with `Q = X·W_Q`, `K = X·W_K`, `V = X·W_V` (rows of `X` are frames).
pub fn attention_head(
    x: &Array2<f64>,
    w_q: &Array2<f64>,
    w_k: &Array2<f64>,
    w_v: &Array2<f64>,
) -> Result<Array2<f64>> {
    let d = x.ncols();
    let dk = w_q.ncols();
    for (name, w) in [("W_Q", w_q), ("W_K", w_k), ("W_V", w_v)] {
        if w.nrows() != d || w.ncols() != dk {
            return Err(Error::Dimension(format!(
                "{name} is {:?}, expected ({d}, {dk})",
                w.dim()
            )));
        }
    }
    if x.nrows() == 0 {
        return Err(Error::Dimension("attention input has no rows".into()));
    }
    let h = head_forward(x.view(), w_q, w_k, w_v);
    Ok(h.attn.dot(&h.v))
}

fn layer_norm(u: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>, eps: f64) -> (Array2<f64>, LayerNormCache) {
    let d = u.ncols() as f64;
    let mean = u.sum_axis(Axis(1)) / d;
    let centered = u - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|x| x * x).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gain + bias;
    (y, LayerNormCache { xhat, inv_std })
}

/// Sinusoidal position codes, `m × d`.
pub(super) fn positional_encoding(m: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, d), |(pos, i)| {
        let pair = (i / 2) as f64 * 2.0;
        let angle = pos as f64 / 10000f64.powf(pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn check_input(x: &Array2<f64>, w: &EncoderWeights, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::Dimension("encoder input has no rows".into()));
    }
    if x.ncols() != cfg.d {
        return Err(Error::Dimension(format!(
            "encoder input has {} columns, config d = {}",
            x.ncols(),
            cfg.d
        )));
    }
    if w.heads.len() != cfg.n_heads
        || w.w_o.dim() != (cfg.n_heads * cfg.d_k(), cfg.d)
        || w.ffn_w1.dim() != (cfg.d, cfg.ffn_dim)
        || w.heads.iter().any(|h| h.w_q.dim() != (cfg.d, cfg.d_k()))
    {
        return Err(Error::Dimension("weights do not match the encoder config".into()));
    }
    Ok(())
}

pub(super) fn forward(x: &Array2<f64>, w: &EncoderWeights, cfg: &EncoderConfig) -> Result<ForwardCache> {
    check_input(x, w, cfg)?;
    let (m, dk) = (x.nrows(), cfg.d_k());
    let x = if cfg.positional {
        x + &positional_encoding(m, cfg.d)
    } else {
        x.clone()
    };

    let heads: Vec<HeadCache> = w
        .heads
        .iter()
        .map(|h| head_forward(x.view(), &h.w_q, &h.w_k, &h.w_v))
        .collect();
    let mut concat = Array2::zeros((m, cfg.n_heads * dk));
    for (i, h) in heads.iter().enumerate() {
        concat
            .slice_mut(s![.., i * dk..(i + 1) * dk])
            .assign(&h.attn.dot(&h.v));
    }
    let u1 = &x + &concat.dot(&w.w_o);
    let (y1, ln1) = layer_norm(&u1, &w.ln1_gain, &w.ln1_bias, cfg.layernorm_eps);

    let hidden_pre = y1.dot(&w.ffn_w1) + &w.ffn_b1;
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let u2 = &y1 + &(hidden.dot(&w.ffn_w2) + &w.ffn_b2);
    let (y2, ln2) = layer_norm(&u2, &w.ln2_gain, &w.ln2_bias, cfg.layernorm_eps);

    let norms = y2.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| !n.is_finite() || n <= 0.0) {
        return Err(Error::Degenerate("encoder produced a zero or non-finite row".into()));
    }
    let out = &y2 / &norms.view().insert_axis(Axis(1));
    Ok(ForwardCache {
        x,
        heads,
        concat,
        ln1,
        y1,
        hidden_pre,
        hidden,
        ln2,
        norms,
        out,
    })
}

/// Encodes an `M × d` feature matrix into `M × d` unit-norm rows.
pub fn encode(x: &Array2<f64>, w: &EncoderWeights, cfg: &EncoderConfig) -> Result<Array2<f64>> {
    Ok(forward(x, w, cfg)?.out)
}

/// `P = Q·Rᵀ`.
pub fn similarity(q: &Array2<f64>, r: &Array2<f64>) -> Array2<f64> {
    q.dot(&r.t())
}
