//! On-disk formats shared by the subcommands. Every artifact carries
//! `schema_version`; those that depend on the token encoding also carry
//! `vocab_hash`, and per-binary ones name the binary and its SHA-256.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use supdis::loader::{load_elf_bytes, BinaryImage};
use supdis::superset::TokenVocab;
use supdis::vsa::{BoundarySet, Derivation};
use supdis::Task;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::new("MissingInput", format!("{}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::new("MissingInput", format!("{}: {e}", path.display())))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::new("Io", format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::new("Io", format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))
}

/// Writes a header line followed by one line per record.
pub fn write_jsonl<H: Serialize, R: Serialize>(path: &Path, header: &H, records: &[R]) -> Result<(), CliError> {
    let mut out = serde_json::to_vec(header).expect("header serializes");
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn read_jsonl<H: DeserializeOwned, R: DeserializeOwned>(path: &Path) -> Result<(H, Vec<R>), CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::new("MissingInput", format!("{}: {e}", path.display())))?;
    let bad = |line: usize, e: &dyn std::fmt::Display| CliError::schema(format!("{}:{line}: {e}", path.display()));
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| bad(1, &"empty file"))?.map_err(|e| bad(1, &e))?;
    let header = serde_json::from_str(&first).map_err(|e| bad(1, &e))?;
    let mut records = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l.map_err(|e| bad(i + 2, &e))?;
        records.push(serde_json::from_str(&l).map_err(|e| bad(i + 2, &e))?);
    }
    Ok((header, records))
}

pub fn check_version(path: &Path, found: u32) -> Result<(), CliError> {
    if found != SCHEMA_VERSION {
        return Err(CliError::schema(format!(
            "{}: schema version {found}, expected {SCHEMA_VERSION}",
            path.display()
        )));
    }
    Ok(())
}

pub fn check_kind(path: &Path, found: &str, expected: &str) -> Result<(), CliError> {
    if found != expected {
        return Err(CliError::schema(format!("{}: a {found:?} artifact where {expected:?} was expected", path.display())));
    }
    Ok(())
}

pub fn check_vocab(what: &str, expected: &str, found: &str) -> Result<(), CliError> {
    if expected != found {
        return Err(CliError::new("VocabMismatch", format!("{what}: vocabulary {found}, expected {expected}")));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hex(vaddr: u32) -> String {
    format!("{vaddr:#x}")
}

pub fn parse_hex(s: &str) -> Result<u32, CliError> {
    let digits = s.strip_prefix("0x").ok_or_else(|| CliError::schema(format!("address {s:?} lacks 0x")))?;
    u32::from_str_radix(digits, 16).map_err(|e| CliError::schema(format!("address {s:?}: {e}")))
}

/// Name (file stem) and digest of an input binary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryId {
    pub binary: String,
    pub sha256: String,
}

impl BinaryId {
    pub fn check(&self, path: &Path, other: &BinaryId) -> Result<(), CliError> {
        if self.sha256 != other.sha256 {
            return Err(CliError::schema(format!(
                "{}: made from binary {} ({}), not {} ({})",
                path.display(),
                self.binary,
                &self.sha256[..12],
                other.binary,
                &other.sha256[..12]
            )));
        }
        Ok(())
    }
}

pub struct LoadedBinary {
    pub id: BinaryId,
    pub img: BinaryImage,
}

pub fn load_binary(path: &Path) -> Result<LoadedBinary, CliError> {
    let bytes = read_bytes(path)?;
    let name = path.file_stem().map_or_else(|| "binary".into(), |s| s.to_string_lossy().into_owned());
    let img = load_elf_bytes(&path.to_string_lossy(), &bytes)?;
    Ok(LoadedBinary { id: BinaryId { binary: name, sha256: sha256_hex(&bytes) }, img })
}

/// Kind tag of a ground-truth label file, per task.
pub fn label_kind(task: Task) -> &'static str {
    match task {
        Task::T1 => "entries",
        Task::T2 => "instrs",
        Task::T3 => "brel",
    }
}

/// `gt-entries`, `gt-instrs` and `gt-brel` output: positive instruction
/// addresses and NOP padding addresses of one binary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFile {
    pub schema_version: u32,
    pub kind: String,
    #[serde(flatten)]
    pub id: BinaryId,
    pub addresses: Vec<String>,
    pub pad: Vec<String>,
    /// Boundary-relevant instruction code offsets per function (`brel` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functions: Option<BTreeMap<String, BTreeSet<usize>>>,
}

impl LabelFile {
    pub fn load(path: &Path) -> Result<LabelFile, CliError> {
        let f: LabelFile = read_json(path)?;
        check_version(path, f.schema_version)?;
        Ok(f)
    }

    pub fn task(&self) -> Option<Task> {
        Task::ALL.into_iter().find(|&t| label_kind(t) == self.kind)
    }

    /// Positive and pad sets as code offsets of `img`.
    pub fn offsets(&self, img: &BinaryImage) -> Result<(BTreeSet<usize>, BTreeSet<usize>), CliError> {
        let conv = |list: &[String]| -> Result<BTreeSet<usize>, CliError> {
            list.iter()
                .map(|s| {
                    let a = parse_hex(s)?;
                    img.vaddr_to_offset(a).ok_or_else(|| CliError::schema(format!("address {s} outside the code")))
                })
                .collect()
        };
        Ok((conv(&self.addresses)?, conv(&self.pad)?))
    }
}

/// `memblocks.json` (from `recover-blocks`) and `blocks_gt.json` (from
/// `gt-blocks`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlocksFile {
    pub schema_version: u32,
    pub kind: String,
    #[serde(flatten)]
    pub id: BinaryId,
    pub blocks: BoundarySet,
    pub rendered: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub derivations: Vec<Derivation>,
    /// Variables left out of the ground truth, by reason.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub skipped: BTreeMap<String, usize>,
}

impl BlocksFile {
    pub fn load(path: &Path) -> Result<BlocksFile, CliError> {
        let f: BlocksFile = read_json(path)?;
        check_version(path, f.schema_version)?;
        Ok(f)
    }
}

/// First line of `dataset.jsonl`; one `TokenSequence` per following line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub kind: String,
    pub task: Task,
    pub seq_len: usize,
    pub vocab_hash: String,
    pub binaries: Vec<BinaryId>,
    pub sequences: usize,
    /// Sequences dropped as exact duplicates.
    pub duplicates: usize,
}

/// `vocab.json`, written next to every dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub schema_version: u32,
    pub vocab_hash: String,
    pub vocab: TokenVocab,
}

impl VocabFile {
    pub fn new(vocab: TokenVocab) -> VocabFile {
        VocabFile { schema_version: SCHEMA_VERSION, vocab_hash: vocab.hash(), vocab }
    }

    pub fn load(path: &Path) -> Result<VocabFile, CliError> {
        let f: VocabFile = read_json(path)?;
        check_version(path, f.schema_version)?;
        check_vocab(&path.display().to_string(), &f.vocab_hash, &f.vocab.hash())?;
        Ok(f)
    }
}

pub fn vocab_path(dataset: &Path) -> PathBuf {
    dataset.with_file_name("vocab.json")
}

/// First line of `pred.jsonl`; one `PredRecord` per following line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredHeader {
    pub schema_version: u32,
    pub kind: String,
    pub task: Task,
    #[serde(flatten)]
    pub id: BinaryId,
    pub vocab_hash: String,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredRecord {
    pub offset: usize,
    pub vaddr: String,
    pub p1: f64,
    pub verdict: bool,
}

pub struct PredFile {
    pub header: PredHeader,
    pub records: Vec<PredRecord>,
}

impl PredFile {
    pub fn load(path: &Path) -> Result<PredFile, CliError> {
        let (header, records): (PredHeader, Vec<PredRecord>) = read_jsonl(path)?;
        check_version(path, header.schema_version)?;
        check_kind(path, &header.kind, "pred")?;
        Ok(PredFile { header, records })
    }

    pub fn positives(&self) -> BTreeSet<usize> {
        self.records.iter().filter(|r| r.verdict).map(|r| r.offset).collect()
    }
}
