//! Superset disassembly: an instruction decode attempt at every code offset.

pub mod encode;
pub mod opcode;
pub mod x86;

use serde::{Deserialize, Serialize};

use crate::loader::BinaryImage;
pub use encode::{
    classify_region, decode1, decode2, encode_disp, DispCode, DispRange, Field, FieldQuintuple,
    FieldTriple, RgnCode, TokenVocab, ABSENT,
};
pub use x86::{decode_at, DecodeFailure, DecodedInstr, Flow, MemOperand, Mnemonic, Operand, Reg};

/// Every successful decode of a code buffer, ordered by offset, plus the
/// offsets where decoding failed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupersetListing {
    pub instrs: Vec<DecodedInstr>,
    pub failures: Vec<usize>,
}

impl SupersetListing {
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// Index of the instruction decoded at `offset`.
    pub fn position(&self, offset: usize) -> Option<usize> {
        self.instrs.binary_search_by_key(&offset, |i| i.offset).ok()
    }

    pub fn get(&self, offset: usize) -> Option<&DecodedInstr> {
        self.position(offset).map(|p| &self.instrs[p])
    }

    fn shift(&mut self, delta: usize) {
        for ins in &mut self.instrs {
            rebase(ins, delta as i64);
        }
        for f in &mut self.failures {
            *f += delta;
        }
    }
}

/// Move an instruction (and its branch targets) by `delta` bytes.
pub fn rebase(ins: &mut DecodedInstr, delta: i64) {
    ins.offset = (ins.offset as i64 + delta) as usize;
    match &mut ins.flow {
        Flow::Jump { target } | Flow::CondJump { target } | Flow::Call { target } => *target += delta,
        _ => {}
    }
    for op in &mut ins.operands {
        if let Operand::Rel { target } = op {
            *target += delta;
        }
    }
}

pub fn superset_disassemble(code: &[u8]) -> SupersetListing {
    decode_range(code, 0, code.len())
}

fn decode_range(code: &[u8], from: usize, to: usize) -> SupersetListing {
    let mut listing = SupersetListing::default();
    for i in from..to {
        match decode_at(code, i) {
            Ok(ins) => listing.instrs.push(ins),
            Err(f) => listing.failures.push(f.offset),
        }
    }
    listing
}

/// Same result as [`superset_disassemble`], with offsets split across
/// `workers` threads and merged in order.
pub fn superset_disassemble_parallel(code: &[u8], workers: usize) -> SupersetListing {
    let workers = workers.max(1);
    if workers == 1 || code.len() < 4096 {
        return superset_disassemble(code);
    }
    let chunk = code.len().div_ceil(workers);
    let parts: Vec<SupersetListing> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let from = (w * chunk).min(code.len());
                let to = ((w + 1) * chunk).min(code.len());
                s.spawn(move || decode_range(code, from, to))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decoder thread panicked")).collect()
    });
    let mut out = SupersetListing::default();
    for p in parts {
        out.instrs.extend(p.instrs);
        out.failures.extend(p.failures);
    }
    out
}

/// Superset of a loaded image. Each executable section is decoded on its own
/// so no instruction spans a gap; offsets index the concatenated code bytes.
pub fn superset_image(img: &BinaryImage, workers: usize) -> SupersetListing {
    let mut out = SupersetListing::default();
    for seg in &img.segments {
        let bytes = &img.code[seg.offset..seg.offset + seg.len];
        let mut part = superset_disassemble_parallel(bytes, workers);
        part.shift(seg.offset);
        out.instrs.extend(part.instrs);
        out.failures.extend(part.failures);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_buffer() {
        let l = superset_disassemble(&[]);
        assert!(l.instrs.is_empty() && l.failures.is_empty());
    }

    #[test]
    fn counts_partition_the_buffer() {
        let code = [0x55, 0x89, 0xe5, 0x0f, 0x0b, 0xc3];
        let l = superset_disassemble(&code);
        assert_eq!(l.instrs.len() + l.failures.len(), code.len());
        assert!(l.instrs.windows(2).all(|w| w[0].offset < w[1].offset));
    }

    #[test]
    fn every_offset_of_nop_sled_decodes() {
        // Seven single-byte instructions: every offset is a valid decode.
        let code = [0x90, 0x40, 0x41, 0x42, 0x50, 0x58, 0xc3];
        assert_eq!(superset_disassemble(&code).instrs.len(), 7);
    }

    #[test]
    fn parallel_matches_sequential() {
        let code: Vec<u8> = (0..20_000u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
        assert_eq!(superset_disassemble(&code), superset_disassemble_parallel(&code, 3));
    }
}
