//! Model configuration, parameter layout and the `model.bin` container.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::dataset::Task;
use crate::superset::{Field, TokenVocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Embedding width per field; sums to `d_model`.
    pub field_dims: Vec<usize>,
    pub dropout: f64,
    pub seed: u64,
    pub vocab: TokenVocab,
}

impl ModelConfig {
    /// Defaults: 384-wide, 6 layers of 8 heads, L = 512.
    pub fn new(task: Task, vocab: TokenVocab) -> ModelConfig {
        let field_dims = match task {
            Task::T3 => vec![77, 77, 77, 77, 76],
            _ => vec![128, 128, 128],
        };
        ModelConfig {
            task,
            seq_len: 512,
            d_model: 384,
            n_layers: 6,
            n_heads: 8,
            ffn_dim: 4 * 384,
            field_dims,
            dropout: 0.1,
            seed: 0,
            vocab,
        }
    }

    pub fn fields(&self) -> &'static [Field] {
        match self.task {
            Task::T3 => &Field::QUINTUPLE,
            _ => &Field::TRIPLE,
        }
    }

    pub fn vocab_hash(&self) -> String {
        self.vocab.hash()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.field_dims.len() != self.task.n_fields() {
            return bad(format!("{} field widths for a {}-field task", self.field_dims.len(), self.task.n_fields()));
        }
        if self.field_dims.iter().sum::<usize>() != self.d_model {
            return bad(format!("field widths sum to {}, not d_model {}", self.field_dims.iter().sum::<usize>(), self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible into {} heads", self.d_model, self.n_heads));
        }
        if self.seq_len == 0 || self.ffn_dim == 0 {
            return bad("zero sequence length or feed-forward width".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub pos: usize,
    /// Per field: table offset and row count (field vocabulary plus the pad row).
    pub emb: Vec<(usize, usize)>,
    pub layers: Vec<LayerIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut tensors: Vec<TensorSpec> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| -> usize {
            let offset = tensors.last().map_or(0, |t| t.offset + t.len());
            tensors.push(TensorSpec { name, shape, offset });
            offset
        };
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        let pos = add("pos_emb".into(), vec![cfg.seq_len, d]);
        let emb = cfg
            .fields()
            .iter()
            .zip(&cfg.field_dims)
            .map(|(field, &w)| {
                let rows = cfg.vocab.field_size(*field) + 1;
                (add(format!("emb.{field:?}").to_lowercase(), vec![rows, w]), rows)
            })
            .collect();
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut t = |n: &str, s: Vec<usize>| add(format!("layer{l}.{n}"), s);
                LayerIdx {
                    ln1_g: t("ln1.gamma", vec![d]),
                    ln1_b: t("ln1.beta", vec![d]),
                    wq: t("attn.wq", vec![d, d]),
                    bq: t("attn.bq", vec![d]),
                    wk: t("attn.wk", vec![d, d]),
                    bk: t("attn.bk", vec![d]),
                    wv: t("attn.wv", vec![d, d]),
                    bv: t("attn.bv", vec![d]),
                    wo: t("attn.wo", vec![d, d]),
                    bo: t("attn.bo", vec![d]),
                    ln2_g: t("ln2.gamma", vec![d]),
                    ln2_b: t("ln2.beta", vec![d]),
                    w1: t("ffn.w1", vec![d, f]),
                    b1: t("ffn.b1", vec![f]),
                    w2: t("ffn.w2", vec![f, d]),
                    b2: t("ffn.b2", vec![d]),
                }
            })
            .collect();
        let lnf_g = add("lnf.gamma".into(), vec![d]);
        let lnf_b = add("lnf.beta".into(), vec![d]);
        let head_w = add("head.w".into(), vec![d, 2]);
        let head_b = add("head.b".into(), vec![2]);
        let total = tensors.last().map_or(0, |t| t.offset + t.len());
        Layout { tensors, pos, emb, layers, lnf_g, lnf_b, head_w, head_b, total }
    }
}

/// All trainable weights in one flat vector.
#[derive(Clone, Debug)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub data: Vec<f64>,
    pub(crate) layout: Layout,
}

/// Standard deviation of the initial weights.
const INIT_STD: f64 = 0.02;

impl ModelParameters {
    /// Normal(0, 0.02) weights and embeddings, unit gains, zero biases.
    pub fn init(cfg: &ModelConfig) -> Result<ModelParameters, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for t in &layout.tensors {
            let slot = &mut data[t.range()];
            if t.name.ends_with("gamma") {
                slot.fill(1.0);
            } else if t.shape.len() == 2 {
                slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        Ok(ModelParameters { config: cfg.clone(), data, layout })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensors.iter().find(|t| t.name == name).map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.tensors.iter().find(|t| t.name == name)?.range();
        Some(&mut self.data[r])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

const MAGIC: &[u8; 8] = b"SUPDISMB";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    vocab_hash: String,
    config: ModelConfig,
    tensors: Vec<TensorSpec>,
}

impl ModelParameters {
    /// `magic | u32 version | u32 header length | JSON header | pad to 8 | f64 LE data`.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = Header {
            format_version: MODEL_FORMAT_VERSION,
            dtype: "f64le".into(),
            vocab_hash: self.config.vocab_hash(),
            config: self.config.clone(),
            tensors: self.layout.tensors.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        let mut buf = Vec::with_capacity(24 + json.len() + 8 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        while buf.len() % 8 != 0 {
            buf.push(0);
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<ModelParameters, ModelError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| ModelError::Format(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelParameters, ModelError> {
        let fmt = |m: &str| ModelError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("not a model file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelError::SchemaMismatch(format!(
                "model format version {version}, expected {MODEL_FORMAT_VERSION}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| ModelError::Format(e.to_string()))?;
        header.config.validate()?;
        if header.vocab_hash != header.config.vocab_hash() {
            return Err(ModelError::VocabMismatch { expected: header.config.vocab_hash(), found: header.vocab_hash });
        }
        let layout = Layout::new(&header.config);
        if header.tensors != layout.tensors {
            return Err(ModelError::SchemaMismatch("tensor manifest does not match the configuration".into()));
        }
        let start = (16 + hlen).div_ceil(8) * 8;
        let body = bytes.get(start..).ok_or_else(|| fmt("truncated data"))?;
        if body.len() != 8 * layout.total {
            return Err(fmt("data length does not match the tensor manifest"));
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(ModelParameters { config: header.config, data, layout })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_size() {
        let cfg = ModelConfig::new(Task::T1, TokenVocab::default());
        let p = ModelParameters::init(&cfg).unwrap();
        // 6 × (4·(d²+d) + 2·d·4d + 4d + d + 4d) plus embeddings and head.
        let d = 384;
        let layer = 4 * (d * d + d) + 8 * d * d + 4 * d + d + 4 * d;
        let emb = 512 * d + (1795 + 258 + 258) * 128;
        assert_eq!(p.len(), 6 * layer + emb + 2 * d + 2 * d + 2);
        assert!(p.is_finite());
    }

    #[test]
    fn rejects_bad_widths() {
        let mut cfg = ModelConfig::new(Task::T3, TokenVocab::default());
        cfg.field_dims = vec![128, 128, 128];
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn container_roundtrip() {
        let mut cfg = ModelConfig::new(Task::T3, TokenVocab::default());
        cfg.d_model = 10;
        cfg.field_dims = vec![2; 5];
        cfg.n_heads = 2;
        cfg.ffn_dim = 8;
        cfg.n_layers = 1;
        cfg.seq_len = 4;
        let p = ModelParameters::init(&cfg).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let q = ModelParameters::from_bytes(&bytes).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.data, p.data);

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(ModelParameters::from_bytes(&bad), Err(ModelError::SchemaMismatch(_))));
        assert!(matches!(ModelParameters::from_bytes(&bytes[..bytes.len() - 8]), Err(ModelError::Format(_))));
    }
}
