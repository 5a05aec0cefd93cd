//! `--config` file: every section and field is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use supdis::model::{LossConfig, ModelConfig, TrainConfig};
use supdis::superset::{DispRange, TokenVocab};
use supdis::vsa::VsaConfig;
use supdis::Task;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threshold: f64,
    pub workers: usize,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub vsa: VsaSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threshold: 0.5,
            workers: 1,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            vsa: VsaSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub seq_len: usize,
    pub disp_lower: i64,
    pub disp_upper: i64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DispRange::default();
        DatasetSection { seq_len: 512, disp_lower: d.lower, disp_upper: d.upper }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Defaults to `4 * d_model`.
    pub ffn_dim: Option<usize>,
    /// Defaults to `d_model` split evenly over the task's fields.
    pub field_dims: Option<Vec<usize>>,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { d_model: 384, n_layers: 6, n_heads: 8, ffn_dim: None, field_dims: None, dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        LossSection { alpha: l.alpha, gamma: l.gamma }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub target_f1: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            target_f1: t.target_f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VsaSection {
    pub k: usize,
    pub widen_after: usize,
    pub max_slots: usize,
}

impl Default for VsaSection {
    fn default() -> Self {
        let v = VsaConfig::default();
        VsaSection { k: v.k, widen_after: v.widen_after, max_slots: v.max_slots }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
        let Some(path) = path else { return Ok(PipelineConfig::default()) };
        let text = crate::artifact::read_text(path)?;
        toml::from_str(&text).map_err(|e| CliError::new("InvalidConfig", format!("{}: {e}", path.display())))
    }

    pub fn vocab(&self) -> TokenVocab {
        TokenVocab::new(DispRange { lower: self.dataset.disp_lower, upper: self.dataset.disp_upper })
    }

    pub fn model_config(&self, task: Task, seq_len: usize, vocab: TokenVocab) -> ModelConfig {
        let m = &self.model;
        let mut cfg = ModelConfig::new(task, vocab);
        cfg.seq_len = seq_len;
        cfg.d_model = m.d_model;
        cfg.n_layers = m.n_layers;
        cfg.n_heads = m.n_heads;
        cfg.ffn_dim = m.ffn_dim.unwrap_or(4 * m.d_model);
        cfg.field_dims = m.field_dims.clone().unwrap_or_else(|| even_split(m.d_model, task.n_fields()));
        cfg.dropout = m.dropout;
        cfg.seed = self.seed;
        cfg
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.loss.alpha, gamma: self.loss.gamma }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            target_f1: t.target_f1,
            threshold: self.threshold,
            ..TrainConfig::default()
        }
    }

    pub fn vsa(&self) -> VsaConfig {
        VsaConfig { k: self.vsa.k, widen_after: self.vsa.widen_after, max_slots: self.vsa.max_slots, ..VsaConfig::default() }
    }
}

/// `total` split into `parts` widths, the remainder going to the first ones.
fn even_split(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}
