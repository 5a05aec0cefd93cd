//! Central finite-difference check of the hand-written gradients.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::params::{ModelConfig, ModelParameters};
use super::train::loss_and_grad;
use super::ModelError;
use crate::dataset::{Label, Origin, Task, TokenSequence};
use crate::superset::TokenVocab;

/// L = 8, d_model = 12, one layer of two heads, no dropout.
pub fn tiny_config(task: Task) -> ModelConfig {
    let mut cfg = ModelConfig::new(task, TokenVocab::default());
    cfg.seq_len = 8;
    cfg.d_model = 12;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.ffn_dim = 48;
    cfg.dropout = 0.0;
    cfg.field_dims = match task {
        Task::T3 => vec![3, 3, 2, 2, 2],
        _ => vec![4, 4, 4],
    };
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Tensor holding the worst entry.
    pub worst: String,
    pub loss: f64,
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so that entries whose true gradient is zero compare on
/// absolute error.
const REL_FLOOR: f64 = 1e-8;

/// Two random sequences: one with a padded tail and a pad label inside, one
/// full.
fn check_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<TokenSequence> {
    let v = &cfg.vocab;
    let l = cfg.seq_len;
    [l - l / 4, l]
        .into_iter()
        .map(|real| {
            let fields = cfg
                .fields()
                .iter()
                .map(|&f| {
                    (0..l)
                        .map(|p| if p < real { v.global(f, rng.gen_range(0..v.field_size(f) as u16)) } else { v.pad })
                        .collect()
                })
                .collect();
            let mut labels: Vec<Label> = (0..l)
                .map(|p| match (p < real, rng.gen_bool(0.4)) {
                    (false, _) => Label::Pad,
                    (true, true) => Label::Pos,
                    (true, false) => Label::Neg,
                })
                .collect();
            labels[1] = Label::Pad;
            TokenSequence {
                task: cfg.task,
                origin: Origin { binary: "gradcheck".into(), first_offset: 0 },
                fields,
                labels,
                offsets: (0..l).map(|p| (p < real).then_some(p)).collect(),
            }
        })
        .collect()
}

/// Compares analytic gradients with `(f(w+h) - f(w-h)) / 2h` on at least
/// `samples` parameters drawn from every tensor, on a randomly initialized
/// model. Dropout is forced off. `params` is not modified.
pub fn grad_check(cfg: &ModelConfig, lc: &LossConfig, samples: usize, seed: u64) -> Result<GradCheckReport, ModelError> {
    let mut cfg = cfg.clone();
    cfg.dropout = 0.0;
    cfg.seed = seed;
    let mut params = ModelParameters::init(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Larger weights than the training initialization, so every nonlinearity
    // is exercised away from its linear regime.
    let w = Normal::new(0.0, 0.4).expect("valid std");
    for t in params.layout.tensors.clone() {
        let gain = t.name.ends_with("gamma");
        for x in &mut params.data[t.range()] {
            *x = if gain { 1.0 + 0.2 * w.sample(&mut rng) } else { w.sample(&mut rng) };
        }
    }
    let batch = check_batch(&cfg, &mut rng);
    let refs: Vec<&TokenSequence> = batch.iter().collect();
    let (loss, grad) = loss_and_grad(&params, &refs, lc)?;

    let used_rows: Vec<BTreeSet<usize>> = cfg
        .fields()
        .iter()
        .enumerate()
        .map(|(f, field)| {
            batch.iter().flat_map(|s| s.fields[f].iter().map(|&id| cfg.vocab.local(*field, id).unwrap())).collect()
        })
        .collect();
    let n_tensors = params.layout.tensors.len();
    let per_tensor = samples.div_ceil(n_tensors).max(1);
    let mut picks = Vec::new();
    for t in &params.layout.tensors {
        let mut cands: Vec<usize> = match params.layout.emb.iter().position(|&(off, _)| off == t.offset) {
            Some(f) => {
                let width = t.shape[1];
                used_rows[f].iter().flat_map(|&r| (0..width).map(move |j| t.offset + r * width + j)).collect()
            }
            None => t.range().collect(),
        };
        cands.shuffle(&mut rng);
        cands.truncate(per_tensor);
        picks.extend(cands.into_iter().map(|i| (i, t.name.clone())));
    }

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: picks.len(), worst: String::new(), loss };
    let mut probe = params.clone();
    for (i, name) in picks {
        let orig = probe.data[i];
        probe.data[i] = orig + FD_STEP;
        let up = loss_and_grad(&probe, &refs, lc)?.0;
        probe.data[i] = orig - FD_STEP;
        let down = loss_and_grad(&probe, &refs, lc)?.0;
        probe.data[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(REL_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = name;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_gradients() {
        for task in [Task::T1, Task::T3] {
            let r = grad_check(&tiny_config(task), &LossConfig::default(), 200, 11).unwrap();
            assert!(r.checked >= 200, "{}", r.checked);
            assert!(r.max_rel_error <= 1e-3, "{task}: {r:?}");
        }
    }

    #[test]
    fn zero_gamma_is_half_cross_entropy() {
        let cfg = tiny_config(Task::T1);
        let params = ModelParameters::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = check_batch(&cfg, &mut rng);
        let refs: Vec<&TokenSequence> = batch.iter().collect();
        let (fl, _) = loss_and_grad(&params, &refs, &LossConfig { alpha: 0.5, gamma: 0.0 }).unwrap();
        let (mut ce, mut n) = (0.0, 0);
        for s in &batch {
            let probs = crate::model::sequence_probs(s, &params).unwrap();
            for (p, l) in probs.iter().zip(&s.labels) {
                match l {
                    Label::Pos => ce -= p[1].ln(),
                    Label::Neg => ce -= p[0].ln(),
                    Label::Pad => continue,
                }
                n += 1;
            }
        }
        assert!((fl - 0.5 * ce / n as f64).abs() < 1e-12);
    }
}
