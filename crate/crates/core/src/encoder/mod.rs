//! Transformer encoder over a video's frame-feature sequence, with the supervised
//! diagonal-target training loop.
//!
//! One post-norm encoder block: multi-head self-attention, output projection,
//! residual + LayerNorm, ReLU feed-forward, residual + LayerNorm, then row-wise L2
//! normalization so encoded features stay on the unit sphere. All arithmetic is f64;
//! weights are persisted as f32.
//!
//! Weight file layout (little-endian): magic `PVCW`, version u16 = 1, then u32 fields
//! d, n_heads, d_k, ffn_dim, flags (bit 0: sinusoidal positional encoding), then every
//! tensor of [`EncoderWeights::tensors`] as f32 in that order.

mod backward;
mod forward;
pub mod mining;
mod train;

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::VideoFeatures;

pub use backward::{gt_matrix, loss_gradient, weighted_mse_loss, LossWeights};
pub use forward::{attention_head, encode, similarity};
pub use train::{train_encoder, train_from, write_history_csv, EpochLoss, Label, TrainConfig, TrainOutcome, TrainingSample};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PVCW";
pub const WEIGHTS_VERSION: u16 = 1;
pub const DEFAULT_FFN_DIM: usize = 128;
pub const DEFAULT_HEADS: usize = 2;
pub const DEFAULT_LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub layernorm_eps: f64,
    /// Add sinusoidal positional encodings to the input.
    pub positional: bool,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(d: usize, n_heads: usize) -> Self {
        Self {
            d,
            n_heads,
            ffn_dim: DEFAULT_FFN_DIM,
            layernorm_eps: DEFAULT_LAYERNORM_EPS,
            positional: false,
            seed: 0,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidArgument("encoder dimensions must be >= 1".into()));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.layernorm_eps.is_nan() || self.layernorm_eps <= 0.0 {
            return Err(Error::InvalidArgument("layernorm_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `d × d_k` each.
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub heads: Vec<HeadWeights>,
    /// `(n_heads · d_k) × d`.
    pub w_o: Array2<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// `d × ffn_dim`.
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    /// `ffn_dim × d`.
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

impl EncoderWeights {
    /// All-zero tensors shaped for `cfg`; also serves as a gradient accumulator.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, dk, f) = (cfg.d, cfg.d_k(), cfg.ffn_dim);
        Self {
            heads: (0..cfg.n_heads)
                .map(|_| HeadWeights {
                    w_q: Array2::zeros((d, dk)),
                    w_k: Array2::zeros((d, dk)),
                    w_v: Array2::zeros((d, dk)),
                })
                .collect(),
            w_o: Array2::zeros((cfg.n_heads * dk, d)),
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            ffn_w1: Array2::zeros((d, f)),
            ffn_b1: Array1::zeros(f),
            ffn_w2: Array2::zeros((f, d)),
            ffn_b2: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
        }
    }

    /// Seeded init: matrices uniform in `[-1/√d, 1/√d]`, biases 0, LayerNorm gains 1.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut w = Self::zeros(cfg);
        let bound = 1.0 / (cfg.d as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut fill = |a: &mut Array2<f64>| a.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        for h in &mut w.heads {
            fill(&mut h.w_q);
            fill(&mut h.w_k);
            fill(&mut h.w_v);
        }
        fill(&mut w.w_o);
        fill(&mut w.ffn_w1);
        fill(&mut w.ffn_w2);
        w.ln1_gain.fill(1.0);
        w.ln2_gain.fill(1.0);
        Ok(w)
    }

    /// Every tensor in the fixed persistence order: per head `w_q, w_k, w_v`, then
    /// `w_o, ln1_gain, ln1_bias, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln2_gain, ln2_bias`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(3 * self.heads.len() + 9);
        for h in &self.heads {
            out.push(h.w_q.as_slice().expect("standard layout"));
            out.push(h.w_k.as_slice().expect("standard layout"));
            out.push(h.w_v.as_slice().expect("standard layout"));
        }
        out.push(self.w_o.as_slice().expect("standard layout"));
        for v in [&self.ln1_gain, &self.ln1_bias] {
            out.push(v.as_slice().expect("standard layout"));
        }
        out.push(self.ffn_w1.as_slice().expect("standard layout"));
        out.push(self.ffn_b1.as_slice().expect("standard layout"));
        out.push(self.ffn_w2.as_slice().expect("standard layout"));
        for v in [&self.ffn_b2, &self.ln2_gain, &self.ln2_bias] {
            out.push(v.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(3 * self.heads.len() + 9);
        for h in &mut self.heads {
            out.push(h.w_q.as_slice_mut().expect("standard layout"));
            out.push(h.w_k.as_slice_mut().expect("standard layout"));
            out.push(h.w_v.as_slice_mut().expect("standard layout"));
        }
        out.push(self.w_o.as_slice_mut().expect("standard layout"));
        out.push(self.ln1_gain.as_slice_mut().expect("standard layout"));
        out.push(self.ln1_bias.as_slice_mut().expect("standard layout"));
        out.push(self.ffn_w1.as_slice_mut().expect("standard layout"));
        out.push(self.ffn_b1.as_slice_mut().expect("standard layout"));
        out.push(self.ffn_w2.as_slice_mut().expect("standard layout"));
        out.push(self.ffn_b2.as_slice_mut().expect("standard layout"));
        out.push(self.ln2_gain.as_slice_mut().expect("standard layout"));
        out.push(self.ln2_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in persistence order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Inverse of [`flatten`](Self::flatten) for the same shapes.
    pub fn assign_flat(&mut self, values: &[f64]) {
        let mut rest = values;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        assert!(rest.is_empty(), "flat parameter vector has the wrong length");
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Configuration and weights together, as persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub weights: EncoderWeights,
}

impl Encoder {
    pub fn new(config: EncoderConfig, weights: EncoderWeights) -> Result<Self> {
        config.validate()?;
        let expected = EncoderWeights::zeros(&config);
        let shapes_match = expected
            .tensors()
            .iter()
            .zip(weights.tensors())
            .all(|(a, b)| a.len() == b.len())
            && expected.heads.len() == weights.heads.len()
            && expected.w_o.dim() == weights.w_o.dim()
            && expected.ffn_w1.dim() == weights.ffn_w1.dim();
        if !shapes_match {
            return Err(Error::Dimension("weight shapes do not match the encoder config".into()));
        }
        Ok(Self { config, weights })
    }

    /// Encodes a feature matrix, returning unit-norm rows of the same shape.
    pub fn encode_features(&self, v: &VideoFeatures) -> Result<VideoFeatures> {
        let x = features_to_array(v);
        let y = encode(&x, &self.weights, &self.config)?;
        let mut out = VideoFeatures::new(
            v.video_id.clone(),
            v.dim(),
            y.iter().map(|&x| x as f32).collect(),
        )?;
        out.fps = v.fps;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(26 + 4 * self.weights.parameter_count());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for v in [c.d, c.n_heads, c.d_k(), c.ffn_dim, c.positional as usize] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for t in self.weights.tensors() {
            for &x in t {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 26;
        if bytes.len() < HEADER {
            return Err(Error::format(bytes.len() as u64, "weight file header truncated"));
        }
        if &bytes[..4] != WEIGHTS_MAGIC {
            return Err(Error::format(0, "bad magic, expected PVCW"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != WEIGHTS_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
        let (d, n_heads, d_k, ffn_dim, flags) = (field(0), field(1), field(2), field(3), field(4));
        let config = EncoderConfig {
            d,
            n_heads,
            ffn_dim,
            layernorm_eps: DEFAULT_LAYERNORM_EPS,
            positional: flags & 1 == 1,
            seed: 0,
        };
        config.validate().map_err(|e| Error::format(6, e.to_string()))?;
        if config.d_k() != d_k {
            return Err(Error::format(14, format!("d_k {d_k} inconsistent with d / n_heads")));
        }
        let mut weights = EncoderWeights::zeros(&config);
        let expected = HEADER + 4 * weights.parameter_count();
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected) as u64,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let values: Vec<f64> = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(k) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::format((HEADER + 4 * k) as u64, "non-finite weight"));
        }
        weights.assign_flat(&values);
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn features_to_array(v: &VideoFeatures) -> Array2<f64> {
    Array2::from_shape_vec(
        (v.frame_count(), v.dim()),
        v.as_slice().iter().map(|&x| x as f64).collect(),
    )
    .expect("shape matches data")
}
