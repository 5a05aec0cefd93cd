//! Ground truth from debug information and linear sweep: memory-block starts,
//! prologue normalization of frame-relative locations, and true instructions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loader::{BinaryImage, FrameBase, LoadError, VarLocation};
use crate::superset::x86::Width;
use crate::superset::{decode_at, DecodedInstr, Mnemonic, Operand, Reg};
use crate::vsa::{BoundarySet, FunctionCfg, RegionRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameKind {
    EbpFrame,
    EspFrame,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrologueInfo {
    pub function: String,
    /// `ebp - initial esp` once the prologue has run.
    pub delta_ebp: Option<i64>,
    /// `esp - initial esp` once the prologue has run.
    pub delta_esp: Option<i64>,
    pub frame_kind: FrameKind,
}

/// Instructions scanned before giving up on a prologue.
const PROLOGUE_WINDOW: usize = 16;

fn is_reg(op: &Operand, r: Reg) -> bool {
    matches!(op, Operand::Reg(g) if g.width == Width::Dword && g.index as usize == r.index())
}

/// Counts pushes ahead of `mov ebp, esp` and the immediate `sub esp, N` that
/// reserves the frame.
pub fn scan_prologue(function: &str, instrs: &[DecodedInstr]) -> PrologueInfo {
    let mut pushes = 0i64;
    let mut ebp_pushes = None;
    let mut reserved = 0i64;
    let mut unknown = false;
    for ins in instrs.iter().take(PROLOGUE_WINDOW) {
        let ops = ins.operands.as_slice();
        match (ins.mnemonic, ops) {
            (Mnemonic::Endbr32 | Mnemonic::Nop, _) => {}
            (Mnemonic::Push, [Operand::Reg(g)]) if g.width == Width::Dword => pushes += 1,
            (Mnemonic::Mov, [d, s]) if is_reg(d, Reg::Ebp) && is_reg(s, Reg::Esp) && ebp_pushes.is_none() => {
                ebp_pushes = Some(pushes)
            }
            (Mnemonic::Sub, [d, Operand::Imm { value }]) if is_reg(d, Reg::Esp) => {
                reserved += value;
                break;
            }
            (Mnemonic::Sub | Mnemonic::And | Mnemonic::Add, [d, _]) if is_reg(d, Reg::Esp) => {
                unknown = true;
                break;
            }
            (Mnemonic::Enter, _) => {
                unknown = true;
                break;
            }
            _ => break,
        }
    }
    let delta_ebp = ebp_pushes.map(|n| -4 * n);
    let frame_kind = match (delta_ebp, unknown) {
        (Some(_), _) => FrameKind::EbpFrame,
        (None, true) => FrameKind::Unknown,
        (None, false) => FrameKind::EspFrame,
    };
    PrologueInfo {
        function: function.to_string(),
        delta_ebp,
        delta_esp: (!unknown).then_some(-4 * pushes - reserved),
        frame_kind,
    }
}

pub fn prologue_delta(f: &FunctionCfg) -> PrologueInfo {
    scan_prologue(&f.name, &f.instrs)
}

/// Decodes straight-line from `offset` far enough to cover a prologue.
fn prologue_at(img: &BinaryImage, offset: usize, name: &str) -> PrologueInfo {
    let end = img.segment_of(offset).map_or(img.len(), |s| s.offset + s.len);
    let mut instrs = Vec::new();
    let mut at = offset;
    while instrs.len() < PROLOGUE_WINDOW && at < end {
        match decode_at(&img.code[..end], at) {
            Ok(i) => {
                at = i.end();
                instrs.push(i);
            }
            Err(_) => break,
        }
    }
    scan_prologue(name, &instrs)
}

/// Extent of one source-level object; only `start` is a boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockExtent {
    pub region: RegionRef,
    pub variable: String,
    pub start: i64,
    /// Last byte, inclusive.
    pub last: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawBlockSet {
    pub boundaries: BoundarySet,
    pub extents: Vec<BlockExtent>,
    /// Variables left out, by reason, including those the loader skipped.
    pub skipped: BTreeMap<String, usize>,
}

impl RawBlockSet {
    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }
}

/// Stack offset relative to the initial `esp` of a frame-relative location.
pub fn normalize_frame_offset(base: FrameBase, disp: i64, p: &PrologueInfo) -> Option<i64> {
    match base {
        FrameBase::Ebp => p.delta_ebp.map(|d| d + disp),
        FrameBase::Esp => p.delta_esp.map(|d| d + disp),
        // The call-frame address is the stack pointer before the call pushed
        // the return address.
        FrameBase::Cfa => Some(4 + disp),
    }
}

/// Memory-block starts from DWARF variables: global variables relative to
/// their region, locals relative to the initial `esp` of their function.
pub fn ext_blk_bnd_dwarf(img: &BinaryImage) -> Result<RawBlockSet, LoadError> {
    let vars = img.dwarf_variables()?;
    let mut out = RawBlockSet::default();
    for (reason, n) in &img.dwarf_skipped {
        *out.skipped.entry(format!("{reason:?}")).or_default() += n;
    }
    let mut prologues: BTreeMap<u32, PrologueInfo> = BTreeMap::new();
    let skip = |out: &mut RawBlockSet, why: &str| *out.skipped.entry(why.to_string()).or_default() += 1;
    for v in vars {
        let size = v.byte_size.max(1) as i64;
        let (region, start) = match v.location {
            VarLocation::GlobalAddr { addr } => match img.regions.locate(addr as i64) {
                Some((g, off)) => (RegionRef::Global(g), off),
                None => {
                    skip(&mut out, "OutsideRegions");
                    continue;
                }
            },
            VarLocation::FrameRelative { base, disp } => {
                let Some(faddr) = v.function_addr else {
                    skip(&mut out, "NoEnclosingFunction");
                    continue;
                };
                let Some(foff) = img.vaddr_to_offset(faddr) else {
                    skip(&mut out, "NoEnclosingFunction");
                    continue;
                };
                let name = img.function_name(faddr);
                let p = prologues.entry(faddr).or_insert_with(|| prologue_at(img, foff, &name));
                match normalize_frame_offset(base, disp, p) {
                    Some(o) => (RegionRef::Stack(name), o),
                    None => {
                        skip(&mut out, "UnknownFrame");
                        continue;
                    }
                }
            }
        };
        match &region {
            RegionRef::Global(g) => out.boundaries.insert_global(*g, start),
            RegionRef::Stack(f) => out.boundaries.insert_stack(f, start),
        }
        out.extents.push(BlockExtent { region, variable: v.name.clone(), start, last: start + size - 1 });
    }
    out.extents.sort_by(|a, b| (&a.region, a.start, &a.variable).cmp(&(&b.region, b.start, &b.variable)));
    Ok(out)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroundTruthError {
    #[error("linear sweep cannot decode the byte at offset {offset}")]
    DecodeGapError { offset: usize },
}

impl GroundTruthError {
    pub fn kind(&self) -> &'static str {
        "DecodeGapError"
    }
}

/// True instructions found by linear sweep; NOP padding is kept apart.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LinearSweep {
    pub instrs: Vec<DecodedInstr>,
    pub pad: BTreeSet<usize>,
}

impl LinearSweep {
    pub fn offsets(&self) -> BTreeSet<usize> {
        self.instrs.iter().map(|i| i.offset).collect()
    }

    /// Instructions that are neither padding nor missing.
    pub fn true_instrs(&self) -> Vec<DecodedInstr> {
        self.instrs.iter().filter(|i| !self.pad.contains(&i.offset)).cloned().collect()
    }

    pub fn truth(&self) -> BTreeSet<usize> {
        self.instrs.iter().map(|i| i.offset).filter(|o| !self.pad.contains(o)).collect()
    }
}

/// Decodes every code segment from its start, advancing by instruction length.
pub fn linear_sweep_ground_truth(img: &BinaryImage) -> Result<LinearSweep, GroundTruthError> {
    let mut out = LinearSweep::default();
    for seg in &img.segments {
        let end = seg.offset + seg.len;
        let code = &img.code[..end];
        let mut at = seg.offset;
        while at < end {
            let i = decode_at(code, at).map_err(|_| GroundTruthError::DecodeGapError { offset: at })?;
            at = i.end();
            if i.is_nop() {
                out.pad.insert(i.offset);
            }
            out.instrs.push(i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use crate::loader::{load_elf_bytes, GlobalRegion};

    #[test]
    fn two_pushes_then_frame() {
        let img = load_elf_bytes("p", &fixture::prologue_sample()).unwrap();
        let off = img.vaddr_to_offset(fixture::PROLOGUE_FN).unwrap();
        let p = prologue_at(&img, off, "fill_array");
        assert_eq!(p.frame_kind, FrameKind::EbpFrame);
        assert_eq!(p.delta_ebp, Some(-8));
        assert_eq!(p.delta_esp, Some(-8 - 0x30));
        let leaf = prologue_at(&img, img.vaddr_to_offset(fixture::LEAF_FN).unwrap(), "leaf_sum");
        assert_eq!(leaf.frame_kind, FrameKind::EspFrame);
        assert_eq!(leaf.delta_ebp, None);
        assert_eq!(leaf.delta_esp, Some(-16));
    }

    #[test]
    fn prologue_sample_blocks() {
        let img = load_elf_bytes("p", &fixture::prologue_sample()).unwrap();
        let raw = ext_blk_bnd_dwarf(&img).unwrap();
        assert_eq!(raw.boundaries.stack["fill_array"], [-44, -40].into());
        assert_eq!(raw.boundaries.stack["leaf_sum"], [-12, -8].into());
        assert_eq!(raw.skipped_total(), 3);
    }

    #[test]
    fn fixture_blocks() {
        let img = load_elf_bytes("f", &fixture::discard_moves()).unwrap();
        let raw = ext_blk_bnd_dwarf(&img).unwrap();
        assert_eq!(raw.boundaries.global[&GlobalRegion::Data], [0, 4, 8].into());
        assert_eq!(raw.boundaries.stack["discard_moves"], [-20, -16].into());
        let rules = raw.extents.iter().find(|e| e.variable == "rules").unwrap();
        assert_eq!((rules.start, rules.last), (8, 31));
    }

    #[test]
    fn stripped_dwarf_is_an_error() {
        let img = load_elf_bytes("e", &fixture::empty_text()).unwrap();
        assert_eq!(ext_blk_bnd_dwarf(&img).unwrap_err().kind(), "NoDwarf");
    }

    #[test]
    fn sweep_marks_padding() {
        let img = load_elf_bytes("f", &fixture::discard_moves()).unwrap();
        let s = linear_sweep_ground_truth(&img).unwrap();
        let truth = s.truth();
        for o in [313, 314, 319, 326, 331, 360, 368] {
            assert!(truth.contains(&o), "{o}");
        }
        assert!(!s.pad.is_empty());
        assert!(s.pad.iter().all(|o| !truth.contains(o)));
    }

    #[test]
    fn sweep_reports_gaps() {
        let mut img = load_elf_bytes("f", &fixture::discard_moves()).unwrap();
        img.code[0] = 0x0f;
        img.code[1] = 0x0b;
        let err = linear_sweep_ground_truth(&img).unwrap_err();
        assert_eq!(err, GroundTruthError::DecodeGapError { offset: 0 });
    }
}
