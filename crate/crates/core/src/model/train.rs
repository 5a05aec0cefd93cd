//! Adam training with linear warmup, and thresholded prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{backward, forward, Dropout};
use super::loss::{focal_from_logits, LossConfig};
use super::params::{ModelConfig, ModelParameters};
use super::{local_ids, ModelError};
use crate::dataset::{build_sequences, DatasetConfig, Label, TokenSequence};
use crate::loader::RegionTable;
use crate::superset::{SupersetListing, TokenVocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of all steps spent ramping the learning rate up from 0.
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop after the first epoch whose training F1 reaches this value.
    pub target_f1: Option<f64>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 1e-4,
            warmup_frac: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            target_f1: None,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Dropout-free F1 on the training set, when a target is set.
    pub train_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch loss at every optimizer step.
    pub loss_curve: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub reached_target: bool,
}

/// Mean focal loss of a batch and its gradient over all parameters.
pub fn loss_and_grad(
    params: &ModelParameters,
    batch: &[&TokenSequence],
    lc: &LossConfig,
) -> Result<(f64, Vec<f64>), ModelError> {
    batch_grad(params, batch, lc, None)
}

fn batch_grad(
    params: &ModelParameters,
    batch: &[&TokenSequence],
    lc: &LossConfig,
    mut drop: Option<&mut Dropout>,
) -> Result<(f64, Vec<f64>), ModelError> {
    let mut grad = vec![0.0; params.len()];
    let count: usize = batch.iter().map(|s| s.labels[..s.real_len()].iter().filter(|l| !l.is_pad()).count()).sum();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    for seq in batch {
        let n = seq.real_len();
        if n == 0 {
            continue;
        }
        let ids = local_ids(seq, params, n)?;
        let pass = forward(params, ids, &vec![true; n], drop.as_deref_mut());
        let mut dlogits = vec![0.0; 2 * n];
        for (t, &label) in seq.labels[..n].iter().enumerate() {
            if label.is_pad() {
                continue;
            }
            let (l, dz) = focal_from_logits([pass.logits[2 * t], pass.logits[2 * t + 1]], label, lc);
            total += l;
            dlogits[2 * t] = dz[0] * scale;
            dlogits[2 * t + 1] = dz[1] * scale;
        }
        backward(params, &pass, &dlogits, &mut grad);
    }
    Ok((total * scale, grad))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - tc.beta1.powi(self.t);
        let c2 = 1.0 - tc.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = tc.beta1 * self.m[i] + (1.0 - tc.beta1) * g[i];
            self.v[i] = tc.beta2 * self.v[i] + (1.0 - tc.beta2) * g[i] * g[i];
            w[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + tc.eps);
        }
    }
}

/// Precision/recall F1 over non-pad positions; 0 when nothing is predicted
/// or nothing is positive.
fn train_f1(params: &ModelParameters, seqs: &[TokenSequence], threshold: f64) -> Result<f64, ModelError> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for seq in seqs {
        let probs = super::sequence_probs(seq, params)?;
        for (p, &label) in probs.iter().zip(&seq.labels) {
            match (p[1] > threshold, label) {
                (_, Label::Pad) => {}
                (true, Label::Pos) => tp += 1,
                (true, Label::Neg) => fp += 1,
                (false, Label::Pos) => fn_ += 1,
                (false, Label::Neg) => {}
            }
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * p * r / (p + r))
}

pub fn train(
    seqs: &[TokenSequence],
    cfg: &ModelConfig,
    lc: &LossConfig,
    tc: &TrainConfig,
) -> Result<(ModelParameters, TrainReport), ModelError> {
    train_with(seqs, cfg, lc, tc, |_| {})
}

/// Trains from a fresh initialization. Batches are drawn in a seeded
/// shuffled order each epoch and gradients accumulate in batch order, so the
/// same inputs and seed reproduce the run bit for bit.
pub fn train_with(
    seqs: &[TokenSequence],
    cfg: &ModelConfig,
    lc: &LossConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelParameters, TrainReport), ModelError> {
    if seqs.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut params = ModelParameters::init(cfg)?;
    for s in seqs {
        local_ids(s, &params, s.len())?;
    }
    let batch = tc.batch_size.max(1);
    let per_epoch = seqs.len().div_ceil(batch);
    let total = per_epoch * tc.epochs;
    let warmup = ((total as f64 * tc.warmup_frac).ceil() as usize).max(1);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f0d);
    let mut drop = Dropout::new(cfg.dropout, cfg.seed ^ 0xd40b_0a75);
    let mut adam = Adam { m: vec![0.0; params.len()], v: vec![0.0; params.len()], t: 0 };
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..seqs.len()).collect();

    for epoch in 0..tc.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(batch) {
            let b: Vec<&TokenSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let (loss, grad) = batch_grad(&params, &b, lc, Some(&mut drop))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::DivergedLoss { step: report.steps, loss });
            }
            let lr = tc.lr * ((report.steps + 1) as f64 / warmup as f64).min(1.0);
            adam.step(&mut params.data, &grad, lr, tc);
            report.loss_curve.push(loss);
            report.steps += 1;
            sum += loss;
        }
        let train_f1 = match tc.target_f1 {
            Some(_) => Some(train_f1(&params, seqs, tc.threshold)?),
            None => None,
        };
        let log = EpochLog { epoch, mean_loss: sum / per_epoch as f64, train_f1 };
        on_epoch(&log);
        report.epochs.push(log);
        if let (Some(target), Some(f1)) = (tc.target_f1, train_f1) {
            if f1 >= target {
                report.reached_target = true;
                break;
            }
        }
    }
    Ok((params, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub offset: usize,
    pub p1: f64,
    /// `p1 > threshold`.
    pub verdict: bool,
}

/// Verdicts for every unpadded position of `seqs`, in sequence order.
pub fn predict_sequences(
    seqs: &[TokenSequence],
    params: &ModelParameters,
    threshold: f64,
) -> Result<Vec<Prediction>, ModelError> {
    let mut out = Vec::new();
    for seq in seqs {
        let probs = super::sequence_probs(seq, params)?;
        for (p, off) in probs.iter().zip(&seq.offsets) {
            let offset = off.expect("unpadded positions carry offsets");
            out.push(Prediction { offset, p1: p[1], verdict: p[1] > threshold });
        }
    }
    Ok(out)
}

/// Encodes the listing for the model's task and classifies every
/// instruction in the task's stream.
pub fn predict(
    listing: &SupersetListing,
    params: &ModelParameters,
    regions: &RegionTable,
    vocab: &TokenVocab,
    threshold: f64,
) -> Result<Vec<Prediction>, ModelError> {
    let cfg = &params.config;
    if vocab.hash() != cfg.vocab_hash() {
        return Err(ModelError::VocabMismatch { expected: cfg.vocab_hash(), found: vocab.hash() });
    }
    let dc = DatasetConfig { seq_len: cfg.seq_len, task: cfg.task, vocab: vocab.clone() };
    let seqs = build_sequences(listing, &dc, regions, "");
    predict_sequences(&seqs, params, threshold)
}
