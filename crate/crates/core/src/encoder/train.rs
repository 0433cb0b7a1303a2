use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backward::{accumulate_gradient, LossWeights};
use super::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    /// Query frames `s_q..s_q+len` copy reference frames `s_r..s_r+len`.
    Positive { s_q: usize, s_r: usize, len: usize },
    /// No copy; the target is all zeros.
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `T × d`.
    pub query: Array2<f64>,
    /// `M × d`.
    pub reference: Array2<f64>,
    pub label: Label,
}

impl TrainingSample {
    pub fn new(query: Array2<f64>, reference: Array2<f64>, label: Label) -> Result<Self> {
        if query.nrows() == 0 || reference.nrows() == 0 {
            return Err(Error::InvalidArgument("training sample with no frames".into()));
        }
        if query.ncols() != reference.ncols() {
            return Err(Error::Dimension(format!(
                "query dim {} vs reference dim {}",
                query.ncols(),
                reference.ncols()
            )));
        }
        if let Label::Positive { s_q, s_r, len } = label {
            if len == 0 || s_q + len > query.nrows() || s_r + len > reference.nrows() {
                return Err(Error::InvalidArgument(format!(
                    "copy (s_q={s_q}, s_r={s_r}, L={len}) does not fit {}x{}",
                    query.nrows(),
                    reference.nrows()
                )));
            }
        }
        Ok(Self {
            query,
            reference,
            label,
        })
    }

    pub fn is_positive(&self) -> bool {
        matches!(self.label, Label::Positive { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seed for negative subsampling and shuffling.
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
            loss_weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: EncoderWeights,
    pub history: Vec<EpochLoss>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Picks this epoch's samples: every positive plus an equal number of negatives
/// drawn without replacement (all negatives if there are fewer), shuffled.
fn epoch_selection(positives: &[usize], negatives: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut chosen = positives.to_vec();
    if negatives.len() <= positives.len() || positives.is_empty() {
        chosen.extend_from_slice(negatives);
    } else {
        let picks = index::sample(rng, negatives.len(), positives.len());
        chosen.extend(picks.iter().map(|i| negatives[i]));
    }
    chosen.shuffle(rng);
    chosen
}

/// Adam on the mean weighted-MSE loss over mini-batches, starting from the seeded
/// initialization of `cfg`.
pub fn train_encoder(
    samples: &[TrainingSample],
    cfg: &EncoderConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    let init = EncoderWeights::init(cfg)?;
    train_from(init, samples, cfg, train)
}

/// Same as [`train_encoder`] but continuing from given weights.
pub fn train_from(
    mut weights: EncoderWeights,
    samples: &[TrainingSample],
    cfg: &EncoderConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.query.ncols() != cfg.d) {
        return Err(Error::Dimension(format!(
            "sample dim {} vs encoder d {}",
            s.query.ncols(),
            cfg.d
        )));
    }
    let (positives, negatives): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| samples[i].is_positive());

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut adam = Adam::new(weights.parameter_count());
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let order = epoch_selection(&positives, &negatives, &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let mut grads = EncoderWeights::zeros(cfg);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                total += accumulate_gradient(&samples[i], &weights, cfg, train.loss_weights, scale, &mut grads)?;
            }
            let mut flat = weights.flatten();
            adam.update(&mut flat, &grads.flatten(), train);
            weights.assign_flat(&flat);
        }
        history.push(EpochLoss {
            epoch: epoch + 1,
            mean_loss: total / order.len() as f64,
        });
    }
    if !weights.is_finite() {
        return Err(Error::Degenerate("training diverged to non-finite weights".into()));
    }
    Ok(TrainOutcome { weights, history })
}

/// `epoch,mean_loss` CSV.
pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochLoss]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,mean_loss\n");
    for h in history {
        let _ = writeln!(out, "{},{}", h.epoch, h.mean_loss);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
