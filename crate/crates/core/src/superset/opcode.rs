//! Opcode-id layout.
//!
//! | ids          | meaning                                   |
//! |--------------|-------------------------------------------|
//! | 0..=255      | one-byte map                              |
//! | 256..=511    | `0F` two-byte map                         |
//! | 512..=767    | ModRM.reg-extended groups (slot * 8 + reg) |
//! | 768..=1535   | VEX opcodes (reserved, never produced)    |
//! | 1536, 1537   | ENDBR32, ENDBR64                          |
//! | 1538..=1793  | reserved                                  |

pub type OpcodeId = u16;

pub const OPCODE_VOCAB: usize = 1794;
pub const TWO_BYTE_BASE: OpcodeId = 256;
pub const GROUP_BASE: OpcodeId = 512;
pub const VEX_BASE: OpcodeId = 768;
pub const VEX_COUNT: usize = 768;
pub const ENDBR32: OpcodeId = 1536;
pub const ENDBR64: OpcodeId = 1537;

/// One-byte opcodes whose ModRM.reg selects the operation, in slot order.
const ONE_BYTE_GROUPS: [u8; 17] = [
    0x80, 0x81, 0x82, 0x83, 0x8f, 0xc0, 0xc1, 0xc6, 0xc7, 0xd0, 0xd1, 0xd2, 0xd3, 0xf6, 0xf7,
    0xfe, 0xff,
];
const TWO_BYTE_GROUPS: [u8; 1] = [0xba];

pub fn one_byte(op: u8) -> OpcodeId {
    op as OpcodeId
}

pub fn two_byte(op: u8) -> OpcodeId {
    TWO_BYTE_BASE + op as OpcodeId
}

pub fn group(slot: usize, reg: u8) -> OpcodeId {
    debug_assert!(slot < 32);
    GROUP_BASE + (slot as OpcodeId) * 8 + (reg & 7) as OpcodeId
}

pub fn one_byte_group_slot(op: u8) -> Option<usize> {
    ONE_BYTE_GROUPS.iter().position(|&g| g == op)
}

pub fn two_byte_group_slot(op: u8) -> Option<usize> {
    TWO_BYTE_GROUPS
        .iter()
        .position(|&g| g == op)
        .map(|p| p + ONE_BYTE_GROUPS.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_fits_vocabulary() {
        let last_group = group(ONE_BYTE_GROUPS.len() + TWO_BYTE_GROUPS.len() - 1, 7);
        assert!(last_group < VEX_BASE);
        assert_eq!(VEX_BASE as usize + VEX_COUNT, ENDBR32 as usize);
        assert!((ENDBR64 as usize) < OPCODE_VOCAB);
    }
}
