//! Mini-batch training of the neural codec.
//!
//! Adam on the mean reconstruction error, single-threaded and fully
//! deterministic for a fixed seed: batch order, jitter noise and parameter
//! updates all derive from the config seed. Jitter perturbs the inputs only;
//! reconstruction targets stay clean.

use sha2::{Digest, Sha256};

use super::neural::NeuralCodec;
use super::{Codec, CodecError};
use crate::field::{compute_norm_stats, field_jitter, FieldSeries, JitterConfig, NormMode};
use crate::rng;

/// Reconstruction loss used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Mean squared error per element.
    #[default]
    L2,
    /// Mean absolute error per element.
    L1,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub jitter: Option<JitterConfig>,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 16,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            jitter: None,
            loss: LossKind::L2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), CodecError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(CodecError::BadConfig("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CodecError::BadConfig("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CodecError::BadConfig("Adam betas must live in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(CodecError::BadConfig("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch losses plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub held_loss: Vec<f64>,
    pub wall_time_s: f64,
    pub param_checksum: String,
}

/// Adam with bias correction. A zero gradient keeps both moments at zero and
/// therefore leaves the parameters untouched.
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub(crate) fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
        }
    }

    pub(crate) fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

}

/// Per-element reconstruction loss and its output gradient.
fn loss_and_grad(kind: LossKind, out: &[f64], target: &[f64], dout: &mut [f64]) -> f64 {
    let n = out.len() as f64;
    let mut loss = 0.0;
    match kind {
        LossKind::L2 => {
            for ((d, o), t) in dout.iter_mut().zip(out).zip(target) {
                let e = o - t;
                loss += e * e;
                *d = 2.0 * e / n;
            }
        }
        LossKind::L1 => {
            for ((d, o), t) in dout.iter_mut().zip(out).zip(target) {
                let e = o - t;
                loss += e.abs();
                *d = e.signum() / n;
            }
        }
    }
    loss / n
}

/// Mean per-sample loss over a series, without jitter.
fn eval_loss(codec: &NeuralCodec, data: &FieldSeries, kind: LossKind) -> f64 {
    let mut dout = vec![0.0; codec.input_dim()];
    let mut total = 0.0;
    for step in data.steps() {
        let cache = codec.forward_cached(step.values());
        total += loss_and_grad(kind, codec.output(&cache), step.values(), &mut dout);
    }
    total / data.len() as f64
}

/// Trains `codec` in place and reports per-epoch train and held-out losses.
///
/// Inputs are expected to be normalized and mean-centered already. Training
/// aborts with a diagnostic if the loss stops being finite.
pub fn train_codec(
    codec: &mut NeuralCodec,
    train: &FieldSeries,
    held: &FieldSeries,
    cfg: &TrainConfig,
) -> Result<TrainReport, CodecError> {
    cfg.validate()?;
    let n = codec.input_dim();
    if train.grid().n() != n || held.grid().n() != n {
        return Err(CodecError::DimensionMismatch { got: train.grid().n(), want: n });
    }
    let t0 = std::time::Instant::now();

    // Jitter amplitude is relative to the training data's own spread.
    let jitter_stats = match &cfg.jitter {
        Some(_) if train.len() >= 2 => Some(compute_norm_stats(train, NormMode::PerLocation)?),
        Some(_) => return Err(CodecError::BadConfig("jitter needs at least two training steps")),
        None => None,
    };

    let steps = train.len();
    let mut order: Vec<usize> = (0..steps).collect();
    let mut grad = vec![0.0; codec.param_count()];
    let mut dout = vec![0.0; n];
    let mut adam = Adam::new(codec.param_count(), cfg);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut held_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng::substream(cfg.seed, epoch as u64);
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &sample_idx in batch {
                let clean = train.step(sample_idx);
                let input = match (&cfg.jitter, &jitter_stats) {
                    (Some(j), Some(stats)) => {
                        let per_call = JitterConfig {
                            seed: rng::mix(j.seed, (epoch * steps + sample_idx) as u64),
                            ..*j
                        };
                        field_jitter(clean, &per_call, stats)?.into_values()
                    }
                    _ => clean.values().to_vec(),
                };
                let cache = codec.forward_cached(&input);
                batch_loss += loss_and_grad(cfg.loss, codec.output(&cache), clean.values(), &mut dout);
                codec.backward(&cache, &dout, &mut grad);
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad {
                *g *= inv;
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(CodecError::Diverged { epoch, batch: batch_idx });
            }
            adam.update(codec.params_mut(), &grad);
            epoch_loss += batch_loss * batch.len() as f64;
        }
        train_loss.push(epoch_loss / steps as f64);
        held_loss.push(eval_loss(codec, held, cfg.loss));
    }

    Ok(TrainReport {
        train_loss,
        held_loss,
        wall_time_s: t0.elapsed().as_secs_f64(),
        param_checksum: param_checksum(codec.params()),
    })
}

/// SHA-256 over the little-endian parameter bytes, hex encoded.
pub fn param_checksum(params: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Compares the analytic parameter gradient of the L2 reconstruction loss
/// against central finite differences; returns the largest scaled error.
///
/// Every parameter is checked up to 500 parameters, a seeded subset beyond
/// that.
pub fn grad_check(codec: &NeuralCodec, sample: &[f64], h: f64) -> Result<f64, CodecError> {
    grad_check_impl(codec, sample, h, None)
}

pub(crate) fn grad_check_impl(
    codec: &NeuralCodec,
    sample: &[f64],
    h: f64,
    corrupt: Option<&dyn Fn(&mut [f64])>,
) -> Result<f64, CodecError> {
    if !(h > 0.0) {
        return Err(CodecError::BadConfig("finite-difference step must be positive"));
    }
    if sample.len() != codec.input_dim() {
        return Err(CodecError::DimensionMismatch { got: sample.len(), want: codec.input_dim() });
    }

    let mut grad = vec![0.0; codec.param_count()];
    let mut dout = vec![0.0; codec.input_dim()];
    let cache = codec.forward_cached(sample);
    loss_and_grad(LossKind::L2, codec.output(&cache), sample, &mut dout);
    codec.backward(&cache, &dout, &mut grad);
    if let Some(c) = corrupt {
        c(&mut grad);
    }

    let count = codec.param_count();
    let indices: Vec<usize> = if count <= 500 {
        (0..count).collect()
    } else {
        let mut rng = rng::substream(0xc0dec, count as u64);
        let mut idx = rand::seq::index::sample(&mut rng, count, 500).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut probe = codec.clone();
    let mut scratch = vec![0.0; codec.input_dim()];
    let mut worst = 0.0f64;
    for i in indices {
        let original = probe.params()[i];
        probe.params_mut()[i] = original + h;
        let cache = probe.forward_cached(sample);
        let f_plus = loss_and_grad(LossKind::L2, probe.output(&cache), sample, &mut scratch);
        probe.params_mut()[i] = original - h;
        let cache = probe.forward_cached(sample);
        let f_minus = loss_and_grad(LossKind::L2, probe.output(&cache), sample, &mut scratch);
        probe.params_mut()[i] = original;

        let fd = (f_plus - f_minus) / (2.0 * h);
        let denom = (grad[i].abs() + fd.abs()).max(1.0);
        worst = worst.max((grad[i] - fd).abs() / denom);
    }
    Ok(worst)
}
