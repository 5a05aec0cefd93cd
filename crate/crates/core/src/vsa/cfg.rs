//! Per-function control-flow graphs over a set of true instructions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::VsaError;
use crate::loader::BinaryImage;
use crate::superset::{DecodedInstr, Flow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Fallthrough,
    Taken,
    Jump,
    CallReturn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub kind: EdgeKind,
    /// Index of the successor block.
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub start: usize,
    /// Range into `FunctionCfg::instrs`.
    pub first: usize,
    pub last: usize,
    pub succs: Vec<Edge>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FunctionCfg {
    pub name: String,
    pub entry: usize,
    /// One past the last byte owned by the function, padding excluded.
    pub end: usize,
    pub instrs: Vec<DecodedInstr>,
    pub blocks: Vec<BasicBlock>,
    /// Bytes popped by `ret imm`, when the function returns that way.
    pub ret_pop: Option<u16>,
}

impl FunctionCfg {
    pub fn block_instrs(&self, b: &BasicBlock) -> &[DecodedInstr] {
        &self.instrs[b.first..=b.last]
    }

    pub fn block_at(&self, offset: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.start == offset)
    }
}

/// Splits `instrs` (true instructions, any order) at the given function
/// entries and builds one CFG per function. A function runs from its entry to
/// the next entry or the end of its code segment.
pub fn build_cfg(
    img: &BinaryImage,
    instrs: &[DecodedInstr],
    entries: &BTreeSet<usize>,
) -> Result<Vec<FunctionCfg>, VsaError> {
    let by_offset: BTreeMap<usize, &DecodedInstr> = instrs.iter().map(|i| (i.offset, i)).collect();
    if let Some(&bad) = entries.iter().find(|e| !by_offset.contains_key(e)) {
        return Err(VsaError::EntryNotInstruction { offset: bad });
    }
    let mut out = Vec::with_capacity(entries.len());
    for &entry in entries {
        let seg_end = img.segment_of(entry).map_or(img.len(), |s| s.offset + s.len);
        let limit = entries.range(entry + 1..).next().copied().unwrap_or(seg_end).min(seg_end);
        let mut body: Vec<DecodedInstr> = by_offset.range(entry..limit).map(|(_, i)| (*i).clone()).collect();
        if let Some(last) = body.last() {
            if last.end() > limit {
                return Err(VsaError::OverlappingFunctions { offset: last.offset, next_entry: limit });
            }
        }
        while body.last().is_some_and(|i| i.is_nop()) && body.len() > 1 {
            body.pop();
        }
        let vaddr = img.offset_to_vaddr(entry).unwrap_or(entry as u32);
        out.push(function_cfg(img.function_name(vaddr), entry, body));
    }
    Ok(out)
}

pub fn function_cfg(name: String, entry: usize, instrs: Vec<DecodedInstr>) -> FunctionCfg {
    let end = instrs.last().map_or(entry, |i| i.end());
    let in_range = |t: i64| t >= entry as i64 && (t as usize) < end;
    let starts: BTreeSet<usize> = instrs.iter().map(|i| i.offset).collect();

    let mut leaders = BTreeSet::new();
    leaders.insert(entry);
    for (k, ins) in instrs.iter().enumerate() {
        match ins.flow {
            Flow::Jump { target } | Flow::CondJump { target } if in_range(target) => {
                if starts.contains(&(target as usize)) {
                    leaders.insert(target as usize);
                }
            }
            _ => {}
        }
        if ins.flow != Flow::Next {
            if let Some(next) = instrs.get(k + 1) {
                leaders.insert(next.offset);
            }
        }
        // A gap in the instruction stream also starts a new block.
        if let Some(next) = instrs.get(k + 1) {
            if next.offset != ins.end() {
                leaders.insert(next.offset);
            }
        }
    }

    let mut blocks = Vec::new();
    let mut first = 0;
    for k in 0..instrs.len() {
        let is_last = k + 1 == instrs.len() || leaders.contains(&instrs[k + 1].offset);
        if is_last {
            blocks.push(BasicBlock { start: instrs[first].offset, first, last: k, succs: Vec::new() });
            first = k + 1;
        }
    }
    let index: BTreeMap<usize, usize> = blocks.iter().enumerate().map(|(i, b)| (b.start, i)).collect();
    let find = |t: i64| -> Option<usize> { in_range(t).then(|| index.get(&(t as usize)).copied()).flatten() };

    for b in blocks.iter_mut() {
        let last = &instrs[b.last];
        let next = index.get(&last.end()).copied();
        let mut succs = Vec::new();
        match last.flow {
            Flow::Next => succs.extend(next.map(|to| Edge { kind: EdgeKind::Fallthrough, to })),
            Flow::Jump { target } => succs.extend(find(target).map(|to| Edge { kind: EdgeKind::Jump, to })),
            Flow::CondJump { target } => {
                succs.extend(find(target).map(|to| Edge { kind: EdgeKind::Taken, to }));
                succs.extend(next.map(|to| Edge { kind: EdgeKind::Fallthrough, to }));
            }
            Flow::Call { .. } | Flow::IndirectCall => {
                succs.extend(next.map(|to| Edge { kind: EdgeKind::CallReturn, to }))
            }
            Flow::IndirectJump | Flow::Ret { .. } | Flow::Halt => {}
        }
        b.succs = succs;
    }

    let ret_pop = instrs.iter().find_map(|i| match i.flow {
        Flow::Ret { pop } if pop > 0 => Some(pop),
        _ => None,
    });
    FunctionCfg { name, entry, end, instrs, blocks, ret_pop }
}
