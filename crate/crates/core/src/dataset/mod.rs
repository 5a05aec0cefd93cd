//! Fixed-length labeled token sequences for the three tasks.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::loader::RegionTable;
use crate::superset::{decode1, decode2, DecodedInstr, SupersetListing, TokenVocab};

/// T1 function entries, T2 true instructions, T3 boundary-relevant instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    T1,
    T2,
    T3,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::T1, Task::T2, Task::T3];

    /// Fields per token: opcode/ModRM/SIB, plus displacement and region for T3.
    pub fn n_fields(self) -> usize {
        match self {
            Task::T3 => 5,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::T1 => "t1",
            Task::T2 => "t2",
            Task::T3 => "t3",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Task::T1),
            "t2" => Ok(Task::T2),
            "t3" => Ok(Task::T3),
            _ => Err(format!("unknown task {s:?} (expected t1, t2 or t3)")),
        }
    }
}

/// Per-position training target. Serialized as `0`, `1` and `-1` for pad.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Neg,
    Pos,
    Pad,
}

impl Label {
    pub fn is_pad(self) -> bool {
        self == Label::Pad
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Label::Neg => 0,
            Label::Pos => 1,
            Label::Pad => -1,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match i8::deserialize(d)? {
            0 => Ok(Label::Neg),
            1 => Ok(Label::Pos),
            -1 => Ok(Label::Pad),
            x => Err(serde::de::Error::custom(format!("invalid label {x}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seq_len: usize,
    pub task: Task,
    pub vocab: TokenVocab,
}

impl DatasetConfig {
    pub fn new(task: Task) -> DatasetConfig {
        DatasetConfig { seq_len: 512, task, vocab: TokenVocab::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub binary: String,
    /// Offset of the first instruction in the sequence.
    pub first_offset: usize,
}

/// One length-L sequence. `fields[f][p]` is the global id of field `f` at
/// position `p`; positions are `0..L`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub task: Task,
    pub origin: Origin,
    pub fields: Vec<Vec<u32>>,
    pub labels: Vec<Label>,
    /// Instruction offset at each position; `None` on the padded tail.
    pub offsets: Vec<Option<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Positions holding an instruction (not the padded tail).
    pub fn real_len(&self) -> usize {
        self.offsets.iter().take_while(|o| o.is_some()).count()
    }

    pub fn token(&self, p: usize) -> Vec<u32> {
        self.fields.iter().map(|f| f[p]).collect()
    }
}

/// Superset instructions the task sees, in offset order.
pub fn task_stream(listing: &SupersetListing, task: Task) -> Vec<&DecodedInstr> {
    listing
        .instrs
        .iter()
        .filter(|i| task != Task::T3 || i.is_mem_access || i.is_branch)
        .collect()
}

/// Splits the task's instruction stream into `ceil(N'/L)` sequences. Labels
/// start at 0 on instructions and pad on the padded tail.
pub fn build_sequences(
    listing: &SupersetListing,
    cfg: &DatasetConfig,
    regions: &RegionTable,
    binary: &str,
) -> Vec<TokenSequence> {
    assert!(cfg.seq_len >= 2, "sequence length must be at least 2");
    let stream = task_stream(listing, cfg.task);
    let nf = cfg.task.n_fields();
    let v = &cfg.vocab;
    stream
        .chunks(cfg.seq_len)
        .map(|chunk| {
            let mut fields = vec![vec![v.pad; cfg.seq_len]; nf];
            let mut labels = vec![Label::Pad; cfg.seq_len];
            let mut offsets = vec![None; cfg.seq_len];
            for (p, ins) in chunk.iter().enumerate() {
                let ids: Vec<u32> = match cfg.task {
                    Task::T3 => {
                        let q = decode2(ins, regions, v.disp_range).expect("stream holds memory and branch instructions");
                        v.quintuple(q).to_vec()
                    }
                    _ => v.triple(decode1(ins)).to_vec(),
                };
                for (f, id) in ids.into_iter().enumerate() {
                    fields[f][p] = id;
                }
                labels[p] = Label::Neg;
                offsets[p] = Some(ins.offset);
            }
            TokenSequence {
                task: cfg.task,
                origin: Origin { binary: binary.to_string(), first_offset: chunk[0].offset },
                fields,
                labels,
                offsets,
            }
        })
        .collect()
}

/// Per-binary ground truth, as code offsets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub entries: Option<BTreeSet<usize>>,
    pub instrs: Option<BTreeSet<usize>>,
    pub brel: Option<BTreeSet<usize>>,
    /// NOP padding instructions; labeled pad for every task.
    pub pad: BTreeSet<usize>,
}

impl GroundTruth {
    pub fn positives(&self, task: Task) -> Option<&BTreeSet<usize>> {
        match task {
            Task::T1 => self.entries.as_ref(),
            Task::T2 => self.instrs.as_ref(),
            Task::T3 => self.brel.as_ref(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("no ground truth for task {0}")]
    MissingGroundTruth(Task),
}

impl DatasetError {
    pub fn kind(&self) -> &'static str {
        "MissingGroundTruth"
    }
}

pub fn label_sequences(
    mut seqs: Vec<TokenSequence>,
    truth: &GroundTruth,
    task: Task,
) -> Result<Vec<TokenSequence>, DatasetError> {
    let pos = truth.positives(task).ok_or(DatasetError::MissingGroundTruth(task))?;
    for s in &mut seqs {
        for (label, off) in s.labels.iter_mut().zip(&s.offsets) {
            let Some(o) = off else { continue };
            *label = if truth.pad.contains(o) {
                Label::Pad
            } else if pos.contains(o) {
                Label::Pos
            } else {
                Label::Neg
            };
        }
    }
    Ok(seqs)
}

/// Drops sequences whose tokens and labels both repeat an earlier sequence.
pub fn dedup_sequences(seqs: Vec<TokenSequence>) -> Vec<TokenSequence> {
    let mut seen: HashSet<(Vec<Vec<u32>>, Vec<Label>)> = HashSet::new();
    seqs.into_iter()
        .filter(|s| seen.insert((s.fields.clone(), s.labels.clone())))
        .collect()
}
