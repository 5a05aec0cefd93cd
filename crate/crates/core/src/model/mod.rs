//! Transformer-encoder token classifier: field embeddings, masked multi-head
//! self-attention, a two-way softmax head, focal-loss training and prediction.
//!
//! Everything runs in `f64` on one thread with hand-written gradients, so a
//! seed fixes every bit of a training run.

mod forward;
mod gradcheck;
mod loss;
mod params;
mod tensor;
mod train;

use thiserror::Error;

use crate::dataset::{Task, TokenSequence};

pub use gradcheck::{grad_check, tiny_config, GradCheckReport};
pub use loss::{focal_loss, focal_term, softmax2, LossConfig};
pub use params::{ModelConfig, ModelParameters, TensorSpec, MODEL_FORMAT_VERSION};
pub use train::{
    loss_and_grad, predict, predict_sequences, train, train_with, EpochLog, Prediction, TrainConfig, TrainReport,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("token id {id} at position {position} is outside the {field} range")]
    IdOutOfRange { field: String, position: usize, id: u32 },
    #[error("vocabulary hash {found} does not match {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("loss became {loss} at step {step}")]
    DivergedLoss { step: usize, loss: f64 },
    #[error("no training sequences")]
    EmptyDataset,
    #[error("sequence is for task {found}, model for {expected}")]
    TaskMismatch { expected: Task, found: Task },
    #[error("sequence length {found}, model expects {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    SchemaMismatch(String),
    #[error("malformed model file: {0}")]
    Format(String),
}

impl ModelError {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelError::IdOutOfRange { .. } => "IdOutOfRange",
            ModelError::VocabMismatch { .. } => "VocabMismatch",
            ModelError::DivergedLoss { .. } => "DivergedLoss",
            ModelError::EmptyDataset => "EmptyDataset",
            ModelError::TaskMismatch { .. } => "TaskMismatch",
            ModelError::LengthMismatch { .. } => "LengthMismatch",
            ModelError::InvalidConfig(_) => "InvalidConfig",
            ModelError::SchemaMismatch(_) => "SchemaMismatch",
            ModelError::Format(_) => "FormatError",
        }
    }
}

/// Field-local ids of the first `n` positions of `seq`.
pub(crate) fn local_ids(seq: &TokenSequence, params: &ModelParameters, n: usize) -> Result<Vec<Vec<usize>>, ModelError> {
    let cfg = &params.config;
    if seq.task != cfg.task || seq.fields.len() != cfg.task.n_fields() {
        return Err(ModelError::TaskMismatch { expected: cfg.task, found: seq.task });
    }
    if seq.len() != cfg.seq_len || seq.fields.iter().any(|f| f.len() != cfg.seq_len) {
        return Err(ModelError::LengthMismatch { expected: cfg.seq_len, found: seq.len() });
    }
    cfg.fields()
        .iter()
        .zip(&seq.fields)
        .map(|(field, ids)| {
            ids[..n]
                .iter()
                .enumerate()
                .map(|(position, &id)| {
                    cfg.vocab.local(*field, id).ok_or_else(|| ModelError::IdOutOfRange {
                        field: format!("{field:?}").to_lowercase(),
                        position,
                        id,
                    })
                })
                .collect()
        })
        .collect()
}

/// `true` on the padded tail, which attention never looks at.
pub fn padding_mask(seq: &TokenSequence) -> Vec<bool> {
    seq.offsets.iter().map(Option::is_none).collect()
}

/// `L × d_model` input rows: position embedding plus the concatenated field
/// embeddings, with pad positions embedding the pad ids.
pub fn embed(seq: &TokenSequence, params: &ModelParameters) -> Result<Vec<f64>, ModelError> {
    let ids = local_ids(seq, params, seq.len())?;
    Ok(forward::embed_ids(params, &ids, seq.len()))
}

/// Runs every encoder layer over `x` (`rows × d_model`). Keys with
/// `mask[t] == true` get zero attention weight.
pub fn encoder_forward(x: &[f64], mask: &[bool], params: &ModelParameters) -> Vec<f64> {
    let n = mask.len();
    assert_eq!(x.len(), n * params.config.d_model, "input rows do not match the mask");
    let keep: Vec<bool> = mask.iter().map(|m| !m).collect();
    let mut h = x.to_vec();
    forward::encode(params, &mut h, n, &keep, None);
    h
}

/// `(p0, p1)` per row of the encoder output.
pub fn classify(h: &[f64], params: &ModelParameters) -> Vec<[f64; 2]> {
    let n = h.len() / params.config.d_model;
    let logits = forward::head_logits(params, h, n);
    logits.chunks_exact(2).map(|z| softmax2([z[0], z[1]])).collect()
}

/// Class probabilities of the unpadded positions of `seq`. Equal to
/// embedding the whole sequence and masking the tail, without computing the
/// tail rows.
pub fn sequence_probs(seq: &TokenSequence, params: &ModelParameters) -> Result<Vec<[f64; 2]>, ModelError> {
    let n = seq.real_len();
    let ids = local_ids(seq, params, n)?;
    let pass = forward::forward(params, ids, &vec![true; n], None);
    Ok(pass.logits.chunks_exact(2).map(|z| softmax2([z[0], z[1]])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Label, Origin};
    use crate::superset::{Field, TokenVocab};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> ModelParameters {
        let mut cfg = tiny_config(Task::T1);
        cfg.seed = seed;
        let mut p = ModelParameters::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        p
    }

    fn random_seq(params: &ModelParameters, real: usize, seed: u64) -> TokenSequence {
        let cfg = &params.config;
        let v = &cfg.vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = cfg.seq_len;
        let fields = cfg
            .fields()
            .iter()
            .map(|&f| {
                (0..l)
                    .map(|p| if p < real { v.global(f, rng.gen_range(0..v.field_size(f) as u16)) } else { v.pad })
                    .collect()
            })
            .collect();
        TokenSequence {
            task: cfg.task,
            origin: Origin { binary: "r".into(), first_offset: 0 },
            fields,
            labels: (0..l).map(|p| if p < real { Label::Neg } else { Label::Pad }).collect(),
            offsets: (0..l).map(|p| (p < real).then_some(p)).collect(),
        }
    }

    fn full_probs(seq: &TokenSequence, p: &ModelParameters) -> Vec<[f64; 2]> {
        let x = embed(seq, p).unwrap();
        classify(&encoder_forward(&x, &padding_mask(seq), p), p)
    }

    #[test]
    fn pad_contents_do_not_leak() {
        let p = tiny(3);
        let seq = random_seq(&p, 5, 1);
        let base = full_probs(&seq, &p);
        let mut other = seq.clone();
        let v = TokenVocab::default();
        other.fields[0][6] = v.global(Field::Opcode, 17);
        other.fields[1][7] = v.global(Field::Modrm, 3);
        other.fields[0].swap(5, 6);
        let moved = full_probs(&other, &p);
        for t in 0..5 {
            for c in 0..2 {
                assert!((base[t][c] - moved[t][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncated_pass_matches_masked_pass() {
        let p = tiny(4);
        let seq = random_seq(&p, 6, 2);
        let full = full_probs(&seq, &p);
        let fast = sequence_probs(&seq, &p).unwrap();
        assert_eq!(fast.len(), 6);
        for t in 0..6 {
            assert!((full[t][1] - fast[t][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_are_distributions() {
        let p = tiny(5);
        for s in 0..4 {
            for pr in full_probs(&random_seq(&p, 8 - s as usize, s), &p) {
                assert!(pr[0] >= 0.0 && pr[1] >= 0.0);
                assert!((pr[0] + pr[1] - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn embedding_is_additive() {
        let p = tiny(6);
        let mut seq = random_seq(&p, 8, 3);
        for f in 0..3 {
            seq.fields[f][7] = seq.fields[f][3];
        }
        let x = embed(&seq, &p).unwrap();
        let d = p.config.d_model;
        let pos = p.tensor("pos_emb").unwrap();
        for j in 0..d {
            let lhs = x[3 * d + j] - x[7 * d + j];
            let rhs = pos[3 * d + j] - pos[7 * d + j];
            assert!((lhs - rhs).abs() < 1e-14);
        }
    }

    #[test]
    fn single_key_attends_to_itself() {
        let mut cfg = tiny_config(Task::T1);
        cfg.n_layers = 1;
        let p = ModelParameters::init(&cfg).unwrap();
        let d = cfg.d_model;
        let x: Vec<f64> = (0..2 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        // Second row masked: the first row's output depends only on itself.
        let a = encoder_forward(&x, &[false, true], &p);
        let b = encoder_forward(&x[..d], &[false], &p);
        for j in 0..d {
            assert!((a[j] - b[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut p = tiny(7);
        p.tensor_mut("head.w").unwrap().fill(0.0);
        p.tensor_mut("head.b").unwrap().fill(0.0);
        let h = vec![0.0; 3 * p.config.d_model];
        assert!(classify(&h, &p).iter().all(|pr| *pr == [0.5, 0.5]));
    }

    #[test]
    fn out_of_range_ids() {
        let p = tiny(8);
        let mut seq = random_seq(&p, 8, 4);
        let v = TokenVocab::default();
        seq.fields[1][2] = v.global(Field::Opcode, 0);
        let err = embed(&seq, &p).unwrap_err();
        assert_eq!(err.kind(), "IdOutOfRange");
        assert!(matches!(err, ModelError::IdOutOfRange { position: 2, .. }));
    }
}
