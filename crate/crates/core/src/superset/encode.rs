//! Integer field encodings: the decode primitives, the memory-region and
//! relative-displacement features, and the global token vocabulary.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::opcode::{OpcodeId, OPCODE_VOCAB};
use super::x86::{DecodedInstr, Reg};
use crate::loader::{GlobalRegion, RegionTable};

pub const MODRM_VOCAB: usize = 257;
pub const SIB_VOCAB: usize = 257;
pub const RGN_VOCAB: usize = 6;
/// Field-local id of an absent ModRM or SIB byte.
pub const ABSENT: u16 = 256;

pub const DEFAULT_DISP_LOWER: i64 = -1024;
pub const DEFAULT_DISP_UPPER: i64 = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RgnCode {
    Heap = 0,
    Stack = 1,
    Rodata = 2,
    Data = 3,
    Bss = 4,
    Unknown = 5,
}

impl RgnCode {
    pub const ALL: [RgnCode; 6] = [
        RgnCode::Heap,
        RgnCode::Stack,
        RgnCode::Rodata,
        RgnCode::Data,
        RgnCode::Bss,
        RgnCode::Unknown,
    ];

    pub fn id(self) -> u16 {
        self as u16
    }

    pub fn global(self) -> Option<GlobalRegion> {
        match self {
            RgnCode::Rodata => Some(GlobalRegion::Rodata),
            RgnCode::Data => Some(GlobalRegion::Data),
            RgnCode::Bss => Some(GlobalRegion::Bss),
            _ => None,
        }
    }
}

impl From<GlobalRegion> for RgnCode {
    fn from(r: GlobalRegion) -> Self {
        match r {
            GlobalRegion::Rodata => RgnCode::Rodata,
            GlobalRegion::Data => RgnCode::Data,
            GlobalRegion::Bss => RgnCode::Bss,
        }
    }
}

/// Inclusive range of exactly-encoded relative displacements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispRange {
    pub lower: i64,
    pub upper: i64,
}

impl Default for DispRange {
    fn default() -> Self {
        DispRange { lower: DEFAULT_DISP_LOWER, upper: DEFAULT_DISP_UPPER }
    }
}

impl DispRange {
    pub fn vocab_size(self) -> usize {
        (self.upper - self.lower + 1) as usize + 3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum DispCode {
    /// No displacement bytes.
    Bottom,
    BelowLower,
    Exact(i64),
    AboveUpper,
}

impl DispCode {
    pub fn bucket(value: i64, range: DispRange) -> DispCode {
        if value < range.lower {
            DispCode::BelowLower
        } else if value > range.upper {
            DispCode::AboveUpper
        } else {
            DispCode::Exact(value)
        }
    }

    pub fn id(self, range: DispRange) -> u16 {
        match self {
            DispCode::Bottom => 0,
            DispCode::BelowLower => 1,
            DispCode::Exact(k) => (2 + (k - range.lower)) as u16,
            DispCode::AboveUpper => (range.upper - range.lower + 3) as u16,
        }
    }
}

/// Field-local ids produced by `decode1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldTriple {
    pub opcode: OpcodeId,
    pub modrm: u16,
    pub sib: u16,
}

/// Field-local ids produced by `decode2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldQuintuple {
    pub opcode: OpcodeId,
    pub modrm: u16,
    pub sib: u16,
    pub disp: DispCode,
    pub rgn: RgnCode,
}

pub fn decode1(ins: &DecodedInstr) -> FieldTriple {
    FieldTriple {
        opcode: ins.opcode_id,
        modrm: ins.modrm.map_or(ABSENT, u16::from),
        sib: ins.sib.map_or(ABSENT, u16::from),
    }
}

/// Heuristic memory-region classification of an instruction's operand.
pub fn classify_region(ins: &DecodedInstr, regions: &RegionTable) -> RgnCode {
    if ins.is_branch {
        return RgnCode::Unknown;
    }
    let Some(mem) = ins.mem_operand else {
        return RgnCode::Unknown;
    };
    if mem.addr16 {
        return RgnCode::Unknown;
    }
    if matches!(mem.base, Some(Reg::Esp | Reg::Ebp)) && mem.index.is_none() {
        return RgnCode::Stack;
    }
    // Absolute, index+disp32 and base+disp32 forms whose constant lands in a
    // global section.
    match regions.locate(mem.disp) {
        Some((region, _)) => region.into(),
        None => RgnCode::Unknown,
    }
}

pub fn encode_disp(
    ins: &DecodedInstr,
    rgn: RgnCode,
    regions: &RegionTable,
    range: DispRange,
) -> DispCode {
    let Some(displacement) = ins.displacement else {
        return DispCode::Bottom;
    };
    let relative = match rgn.global() {
        Some(region) => match regions.get(region) {
            Some(r) => displacement - r.start as i64,
            None => displacement,
        },
        None => displacement,
    };
    DispCode::bucket(relative, range)
}

/// The quintuple for memory-access and branching instructions; `None` for all
/// other instructions, which are not part of the block-boundary task.
pub fn decode2(ins: &DecodedInstr, regions: &RegionTable, range: DispRange) -> Option<FieldQuintuple> {
    let t = decode1(ins);
    let (disp, rgn) = if ins.is_branch {
        (DispCode::Bottom, RgnCode::Unknown)
    } else if ins.is_mem_access {
        let rgn = classify_region(ins, regions);
        (encode_disp(ins, rgn, regions, range), rgn)
    } else {
        return None;
    };
    Some(FieldQuintuple { opcode: t.opcode, modrm: t.modrm, sib: t.sib, disp, rgn })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Opcode,
    Modrm,
    Sib,
    Disp,
    Rgn,
}

impl Field {
    /// Field order inside a token tuple for each task.
    pub const TRIPLE: [Field; 3] = [Field::Opcode, Field::Modrm, Field::Sib];
    pub const QUINTUPLE: [Field; 5] = [Field::Opcode, Field::Modrm, Field::Sib, Field::Disp, Field::Rgn];
    /// Order of the global id ranges.
    pub const LAYOUT: [Field; 5] = [Field::Opcode, Field::Modrm, Field::Sib, Field::Rgn, Field::Disp];
}

/// Global token layout: every field owns a disjoint contiguous id range and
/// one id past the last range is the padding token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    pub disp_range: DispRange,
    pub ranges: Vec<FieldRange>,
    pub pad: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldRange {
    pub field: Field,
    pub base: u32,
    pub size: u32,
}

impl Default for TokenVocab {
    fn default() -> Self {
        TokenVocab::new(DispRange::default())
    }
}

impl TokenVocab {
    pub fn new(disp_range: DispRange) -> TokenVocab {
        let mut base = 0u32;
        let ranges = Field::LAYOUT
            .iter()
            .map(|&field| {
                let size = match field {
                    Field::Opcode => OPCODE_VOCAB,
                    Field::Modrm => MODRM_VOCAB,
                    Field::Sib => SIB_VOCAB,
                    Field::Rgn => RGN_VOCAB,
                    Field::Disp => disp_range.vocab_size(),
                } as u32;
                let r = FieldRange { field, base, size };
                base += size;
                r
            })
            .collect();
        TokenVocab { disp_range, ranges, pad: base }
    }

    pub fn range(&self, field: Field) -> FieldRange {
        *self.ranges.iter().find(|r| r.field == field).expect("every field has a range")
    }

    pub fn field_size(&self, field: Field) -> usize {
        self.range(field).size as usize
    }

    /// Total number of ids including the padding id.
    pub fn len(&self) -> usize {
        self.pad as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn global(&self, field: Field, local: u16) -> u32 {
        let r = self.range(field);
        debug_assert!((local as u32) < r.size);
        r.base + local as u32
    }

    /// Field-local id of a global id; the padding id maps to `field_size`.
    pub fn local(&self, field: Field, global: u32) -> Option<usize> {
        let r = self.range(field);
        if global == self.pad {
            Some(r.size as usize)
        } else if global >= r.base && global < r.base + r.size {
            Some((global - r.base) as usize)
        } else {
            None
        }
    }

    pub fn triple(&self, t: FieldTriple) -> [u32; 3] {
        [
            self.global(Field::Opcode, t.opcode),
            self.global(Field::Modrm, t.modrm),
            self.global(Field::Sib, t.sib),
        ]
    }

    pub fn quintuple(&self, q: FieldQuintuple) -> [u32; 5] {
        [
            self.global(Field::Opcode, q.opcode),
            self.global(Field::Modrm, q.modrm),
            self.global(Field::Sib, q.sib),
            self.global(Field::Disp, q.disp.id(self.disp_range)),
            self.global(Field::Rgn, q.rgn.id()),
        ]
    }

    /// Short content hash used to reject stale artifact combinations.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("vocab serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loader::RegionRange;
    use crate::superset::x86::decode_at;

    fn regions() -> RegionTable {
        let mut t = RegionTable::default();
        t.insert(GlobalRegion::Data, RegionRange { start: 0x804a010, end: 0x804a02f });
        t
    }

    #[test]
    fn vocabulary_sizes_and_disjointness() {
        let v = TokenVocab::default();
        let sizes: Vec<u32> = Field::LAYOUT.iter().map(|&f| v.range(f).size).collect();
        assert_eq!(sizes, vec![1794, 257, 257, 6, 2052]);
        assert_eq!(v.pad, 1794 + 257 + 257 + 6 + 2052);
        let mut covered = vec![0u8; v.len()];
        for r in &v.ranges {
            for id in r.base..r.base + r.size {
                covered[id as usize] += 1;
            }
        }
        covered[v.pad as usize] += 1;
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn disp_buckets() {
        let r = DispRange::default();
        assert_eq!(DispCode::bucket(-5000, r), DispCode::BelowLower);
        assert_eq!(DispCode::bucket(1025, r), DispCode::AboveUpper);
        assert_eq!(DispCode::bucket(-1024, r), DispCode::Exact(-1024));
        assert_eq!(DispCode::Exact(-1024).id(r), 2);
        assert_eq!(DispCode::AboveUpper.id(r) as usize, r.vocab_size() - 1);
    }

    #[test]
    fn stack_and_global_quintuples() {
        let regs = regions();
        let store = decode_at(&[0xc7, 0x45, 0xf4, 0, 0, 0, 0], 0).unwrap();
        let q = decode2(&store, &regs, DispRange::default()).unwrap();
        assert_eq!((q.rgn, q.disp), (RgnCode::Stack, DispCode::Exact(-12)));
        assert_eq!((q.modrm, q.sib), (0x45, ABSENT));

        let global = decode_at(&[0x8b, 0x0c, 0xc5, 0x18, 0xa0, 0x04, 0x08], 0).unwrap();
        let q = decode2(&global, &regs, DispRange::default()).unwrap();
        assert_eq!((q.rgn, q.disp), (RgnCode::Data, DispCode::Exact(8)));
        assert_ne!(q.sib, ABSENT);

        let jle = decode_at(&[0x7e, 0xc6], 0).unwrap();
        let q = decode2(&jle, &regs, DispRange::default()).unwrap();
        assert_eq!((q.rgn, q.disp), (RgnCode::Unknown, DispCode::Bottom));

        let add = decode_at(&[0x83, 0xc0, 0x01], 0).unwrap();
        assert_eq!(decode2(&add, &regs, DispRange::default()), None);
    }

    #[test]
    fn untrackable_operand_is_unknown() {
        // mov eax, [eax+ebx*4]
        let i = decode_at(&[0x8b, 0x04, 0x98], 0).unwrap();
        assert_eq!(classify_region(&i, &regions()), RgnCode::Unknown);
        assert_eq!(encode_disp(&i, RgnCode::Unknown, &regions(), DispRange::default()), DispCode::Bottom);
    }

    #[test]
    fn nop_triple() {
        let i = decode_at(&[0x90], 0).unwrap();
        assert_eq!(decode1(&i), FieldTriple { opcode: 0x90, modrm: ABSENT, sib: ABSENT });
    }
}
