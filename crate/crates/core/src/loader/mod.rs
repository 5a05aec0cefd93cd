//! ELF32 loading: code bytes, global-region layout, symbols and DWARF variables.

pub mod dwarf;
pub mod elf;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dwarf::{DwarfReport, DwarfVariable, FrameBase, SkipReason, VarLocation};
use elf::{ElfFile, SHF_ALLOC, SHT_NOBITS, STT_FUNC, STT_OBJECT};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("not an ELF file")]
    NotElf,
    #[error("64-bit ELF is not supported")]
    WrongClass,
    #[error("truncated ELF file")]
    TruncatedFile,
    #[error("unsupported ELF: {0}")]
    Unsupported(String),
    #[error("binary has no symbol table")]
    NoSymbols,
    #[error("binary has no .debug_info")]
    NoDwarf,
    #[error("malformed DWARF: {0}")]
    MalformedDwarf(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LoadError {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            LoadError::NotElf => "NotElf",
            LoadError::WrongClass => "WrongClass",
            LoadError::TruncatedFile => "TruncatedFile",
            LoadError::Unsupported(_) => "Unsupported",
            LoadError::NoSymbols => "NoSymbols",
            LoadError::NoDwarf => "NoDwarf",
            LoadError::MalformedDwarf(_) => "MalformedDwarf",
            LoadError::Io { .. } => "MissingInput",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalRegion {
    Rodata,
    Data,
    Bss,
}

impl GlobalRegion {
    pub const ALL: [GlobalRegion; 3] = [GlobalRegion::Rodata, GlobalRegion::Data, GlobalRegion::Bss];

    pub fn name(self) -> &'static str {
        match self {
            GlobalRegion::Rodata => "rodata",
            GlobalRegion::Data => "data",
            GlobalRegion::Bss => "bss",
        }
    }

    pub fn section_name(self) -> &'static str {
        match self {
            GlobalRegion::Rodata => ".rodata",
            GlobalRegion::Data => ".data",
            GlobalRegion::Bss => ".bss",
        }
    }

    pub fn from_name(name: &str) -> Option<GlobalRegion> {
        GlobalRegion::ALL.into_iter().find(|r| r.name() == name)
    }
}

/// Inclusive virtual-address range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRange {
    pub start: u32,
    pub end: u32,
}

impl RegionRange {
    pub fn contains(self, addr: i64) -> bool {
        addr >= self.start as i64 && addr <= self.end as i64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionTable {
    pub entries: BTreeMap<GlobalRegion, RegionRange>,
}

impl RegionTable {
    pub fn insert(&mut self, region: GlobalRegion, range: RegionRange) {
        self.entries.insert(region, range);
    }

    pub fn get(&self, region: GlobalRegion) -> Option<RegionRange> {
        self.entries.get(&region).copied()
    }

    /// The region containing `addr` and the offset of `addr` from its start.
    pub fn locate(&self, addr: i64) -> Option<(GlobalRegion, i64)> {
        self.entries
            .iter()
            .find(|(_, r)| r.contains(addr))
            .map(|(&g, r)| (g, addr - r.start as i64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Function,
    Object,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolEntry {
    pub name: String,
    pub vaddr: u32,
    pub size: u32,
    pub kind: SymbolKind,
}

/// One executable section inside the concatenated code buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSegment {
    pub name: String,
    pub vaddr: u32,
    pub offset: usize,
    pub len: usize,
}

impl CodeSegment {
    pub fn is_plt(&self) -> bool {
        self.name == ".plt" || self.name.starts_with(".plt.")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum DebugInfoStatus {
    Absent,
    Parsed,
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryImage {
    pub path: String,
    pub code: Vec<u8>,
    pub code_vaddr: u32,
    pub segments: Vec<CodeSegment>,
    pub regions: RegionTable,
    pub symbols: Vec<SymbolEntry>,
    pub has_symtab: bool,
    pub dwarf_vars: Vec<DwarfVariable>,
    pub dwarf_skipped: BTreeMap<SkipReason, usize>,
    pub debug_info: DebugInfoStatus,
}

impl BinaryImage {
    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    pub fn segment_of(&self, offset: usize) -> Option<&CodeSegment> {
        self.segments.iter().find(|s| offset >= s.offset && offset < s.offset + s.len)
    }

    pub fn offset_to_vaddr(&self, offset: usize) -> Option<u32> {
        self.segment_of(offset).map(|s| s.vaddr + (offset - s.offset) as u32)
    }

    pub fn vaddr_to_offset(&self, vaddr: u32) -> Option<usize> {
        self.segments
            .iter()
            .find(|s| vaddr >= s.vaddr && ((vaddr - s.vaddr) as usize) < s.len)
            .map(|s| s.offset + (vaddr - s.vaddr) as usize)
    }

    /// Name of the function symbol at `vaddr`, or `sub_<hex>` when none.
    pub fn function_name(&self, vaddr: u32) -> String {
        self.symbols
            .iter()
            .find(|s| s.kind == SymbolKind::Function && s.vaddr == vaddr)
            .map(|s| s.name.clone())
            .unwrap_or_else(|| format!("sub_{vaddr:x}"))
    }

    /// Loaded variable list; errors when the binary carries no usable DWARF.
    pub fn dwarf_variables(&self) -> Result<&[DwarfVariable], LoadError> {
        match &self.debug_info {
            DebugInfoStatus::Absent => Err(LoadError::NoDwarf),
            DebugInfoStatus::Malformed(m) => Err(LoadError::MalformedDwarf(m.clone())),
            DebugInfoStatus::Parsed => Ok(&self.dwarf_vars),
        }
    }
}

pub fn load_elf(path: impl AsRef<Path>) -> Result<BinaryImage, LoadError> {
    let path = path.as_ref();
    let data = std::fs::read(path)
        .map_err(|source| LoadError::Io { path: path.display().to_string(), source })?;
    load_elf_bytes(&path.display().to_string(), &data)
}

pub fn load_elf_bytes(path: &str, data: &[u8]) -> Result<BinaryImage, LoadError> {
    let elf = ElfFile::parse(data)?;

    let mut exec: Vec<_> = elf.sections.iter().filter(|s| s.is_exec() && s.flags & SHF_ALLOC != 0).collect();
    exec.sort_by_key(|s| s.addr);
    let mut code = Vec::new();
    let mut segments = Vec::new();
    for s in exec {
        let bytes = elf.bytes(s);
        segments.push(CodeSegment { name: s.name.clone(), vaddr: s.addr, offset: code.len(), len: bytes.len() });
        code.extend_from_slice(bytes);
    }
    let code_vaddr = segments.first().map_or(0, |s| s.vaddr);

    let mut regions = RegionTable::default();
    for g in GlobalRegion::ALL {
        if let Some(s) = elf.section(g.section_name()) {
            if s.size > 0 {
                regions.insert(g, RegionRange { start: s.addr, end: s.addr + s.size - 1 });
            }
        }
    }

    let has_symtab = elf.sections.iter().any(|s| s.kind == elf::SHT_SYMTAB);
    let symbols = elf
        .symbols()?
        .into_iter()
        .filter(|s| !s.name.is_empty() && s.shndx != 0)
        .filter_map(|s| {
            let kind = match s.kind {
                STT_FUNC => SymbolKind::Function,
                STT_OBJECT => SymbolKind::Object,
                0 => SymbolKind::Other,
                _ => return None,
            };
            Some(SymbolEntry { name: s.name, vaddr: s.value, size: s.size, kind })
        })
        .collect();

    let debug: BTreeMap<String, Vec<u8>> = elf
        .sections
        .iter()
        .filter(|s| s.name.starts_with(".debug_") && s.kind != SHT_NOBITS)
        .map(|s| (s.name.clone(), elf.bytes(s).to_vec()))
        .collect();
    let (debug_info, dwarf_vars, dwarf_skipped) = if !debug.contains_key(".debug_info") {
        (DebugInfoStatus::Absent, Vec::new(), BTreeMap::new())
    } else {
        match dwarf::parse_variables(&debug) {
            Ok(r) => (DebugInfoStatus::Parsed, r.variables, r.skipped),
            Err(e) => (DebugInfoStatus::Malformed(e.to_string()), Vec::new(), BTreeMap::new()),
        }
    };

    Ok(BinaryImage {
        path: path.to_string(),
        code,
        code_vaddr,
        segments,
        regions,
        symbols,
        has_symtab,
        dwarf_vars,
        dwarf_skipped,
        debug_info,
    })
}

/// Virtual addresses of function symbols inside the code, excluding `.plt`
/// trampolines.
pub fn function_entry_ground_truth(img: &BinaryImage) -> Result<BTreeSet<u32>, LoadError> {
    if !img.has_symtab || img.symbols.is_empty() {
        return Err(LoadError::NoSymbols);
    }
    Ok(img
        .symbols
        .iter()
        .filter(|s| s.kind == SymbolKind::Function)
        .filter(|s| {
            img.vaddr_to_offset(s.vaddr)
                .and_then(|o| img.segment_of(o))
                .is_some_and(|seg| !seg.is_plt())
        })
        .map(|s| s.vaddr)
        .collect())
}

/// [`function_entry_ground_truth`] as code offsets.
pub fn function_entry_offsets(img: &BinaryImage) -> Result<BTreeSet<usize>, LoadError> {
    Ok(function_entry_ground_truth(img)?
        .into_iter()
        .filter_map(|va| img.vaddr_to_offset(va))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_is_inclusive() {
        let mut t = RegionTable::default();
        t.insert(GlobalRegion::Data, RegionRange { start: 0x100, end: 0x10f });
        assert_eq!(t.locate(0x100), Some((GlobalRegion::Data, 0)));
        assert_eq!(t.locate(0x10f), Some((GlobalRegion::Data, 15)));
        assert_eq!(t.locate(0x110), None);
        assert_eq!(t.locate(-4), None);
    }

    #[test]
    fn rejects_non_elf_and_elf64() {
        assert!(matches!(load_elf_bytes("x", b"hello world, not elf"), Err(LoadError::NotElf)));
        let mut hdr = vec![0u8; 64];
        hdr[..4].copy_from_slice(b"\x7fELF");
        hdr[4] = 2;
        hdr[5] = 1;
        assert!(matches!(load_elf_bytes("x", &hdr), Err(LoadError::WrongClass)));
        hdr[4] = 1;
        assert!(matches!(load_elf_bytes("x", &hdr[..30]), Err(LoadError::TruncatedFile)));
    }
}
