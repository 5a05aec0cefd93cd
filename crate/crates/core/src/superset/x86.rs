//! IA-32 instruction decoder covering the integer one-byte map, the x87 escape
//! range (length only) and the `0F` two-byte subset that compilers emit.
//!
//! Prefixes are consumed so that lengths are right, but they never reach the
//! token fields.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::opcode::{self, OpcodeId};

/// Architectural upper bound on instruction length.
pub const MAX_INSTR_LEN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reg {
    Eax = 0,
    Ecx = 1,
    Edx = 2,
    Ebx = 3,
    Esp = 4,
    Ebp = 5,
    Esi = 6,
    Edi = 7,
}

impl Reg {
    pub const ALL: [Reg; 8] = [
        Reg::Eax,
        Reg::Ecx,
        Reg::Edx,
        Reg::Ebx,
        Reg::Esp,
        Reg::Ebp,
        Reg::Esi,
        Reg::Edi,
    ];

    pub fn from_index(index: u8) -> Reg {
        Reg::ALL[(index & 7) as usize]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"][self as usize]
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Width {
    Byte,
    Word,
    Dword,
    /// Far pointers, x87 operands and descriptor-sized memory.
    Other,
}

impl Width {
    pub fn bytes(self) -> Option<u32> {
        match self {
            Width::Byte => Some(1),
            Width::Word => Some(2),
            Width::Dword => Some(4),
            Width::Other => None,
        }
    }
}

/// General-purpose register reference. Byte registers 4..=7 are `ah..bh`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Gpr {
    pub index: u8,
    pub width: Width,
}

impl Gpr {
    pub fn dword(reg: Reg) -> Gpr {
        Gpr { index: reg as u8, width: Width::Dword }
    }

    /// The full 32-bit register when this is a 32-bit access.
    pub fn as_dword(self) -> Option<Reg> {
        (self.width == Width::Dword).then(|| Reg::from_index(self.index))
    }

    /// The 32-bit register whose bits this reference reads or writes.
    pub fn container(self) -> Reg {
        match self.width {
            Width::Byte => Reg::from_index(self.index & 3),
            _ => Reg::from_index(self.index),
        }
    }
}

impl fmt::Display for Gpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const B: [&str; 8] = ["al", "cl", "dl", "bl", "ah", "ch", "dh", "bh"];
        const W: [&str; 8] = ["ax", "cx", "dx", "bx", "sp", "bp", "si", "di"];
        match self.width {
            Width::Byte => f.write_str(B[self.index as usize & 7]),
            Width::Word => f.write_str(W[self.index as usize & 7]),
            _ => f.write_str(Reg::from_index(self.index).name()),
        }
    }
}

/// Symbolic memory operand `[base + index*scale + disp]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemOperand {
    pub base: Option<Reg>,
    pub index: Option<Reg>,
    pub scale: u8,
    pub disp: i64,
    /// Set for 16-bit addressing (0x67 prefix); base/index are then not tracked.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub addr16: bool,
}

impl MemOperand {
    pub fn absolute(addr: u32) -> MemOperand {
        MemOperand { base: None, index: None, scale: 1, disp: addr as i64, addr16: false }
    }

    pub fn based(base: Reg, disp: i64) -> MemOperand {
        MemOperand { base: Some(base), index: None, scale: 1, disp, addr16: false }
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.addr16 {
            return write!(f, "[addr16{:+#x}]", self.disp);
        }
        f.write_str("[")?;
        let mut first = true;
        if let Some(b) = self.base {
            write!(f, "{b}")?;
            first = false;
        }
        if let Some(i) = self.index {
            if !first {
                f.write_str("+")?;
            }
            write!(f, "{i}*{}", self.scale)?;
            first = false;
        }
        if first {
            write!(f, "{:#x}", self.disp)?;
        } else if self.disp < 0 {
            write!(f, "-{:#x}", -self.disp)?;
        } else if self.disp > 0 {
            write!(f, "+{:#x}", self.disp)?;
        }
        f.write_str("]")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Operand {
    Reg(Gpr),
    Seg { index: u8 },
    Mem { mem: MemOperand, width: Width },
    Imm { value: i64 },
    /// Branch target as an offset into the decoded buffer; may lie outside it.
    Rel { target: i64 },
    St { index: u8 },
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Seg { index } => {
                f.write_str(["es", "cs", "ss", "ds", "fs", "gs", "?s", "?s"][*index as usize & 7])
            }
            Operand::Mem { mem, width } => {
                let w = match width {
                    Width::Byte => "byte ",
                    Width::Word => "word ",
                    Width::Dword => "dword ",
                    Width::Other => "",
                };
                write!(f, "{w}{mem}")
            }
            Operand::Imm { value } => write!(f, "{value:#x}"),
            Operand::Rel { target } => write!(f, "{target}"),
            Operand::St { index } => write!(f, "st({index})"),
        }
    }
}

/// Condition codes in encoding order (`70+cc`, `0F 80+cc`, `0F 90+cc`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cond {
    O,
    No,
    B,
    Ae,
    E,
    Ne,
    Be,
    A,
    S,
    Ns,
    P,
    Np,
    L,
    Ge,
    Le,
    G,
}

impl Cond {
    pub fn from_bits(cc: u8) -> Cond {
        use Cond::*;
        [O, No, B, Ae, E, Ne, Be, A, S, Ns, P, Np, L, Ge, Le, G][(cc & 15) as usize]
    }

    pub fn negate(self) -> Cond {
        Cond::from_bits(self as u8 ^ 1)
    }

    pub fn suffix(self) -> &'static str {
        [
            "o", "no", "b", "ae", "e", "ne", "be", "a", "s", "ns", "p", "np", "l", "ge", "le", "g",
        ][self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mnemonic {
    Add,
    Or,
    Adc,
    Sbb,
    And,
    Sub,
    Xor,
    Cmp,
    Push,
    Pop,
    Inc,
    Dec,
    Pusha,
    Popa,
    Bound,
    Arpl,
    Imul,
    Ins,
    Outs,
    Jcc(Cond),
    Test,
    Xchg,
    Mov,
    Lea,
    Nop,
    Cwde,
    Cdq,
    CallFar,
    Wait,
    Pushf,
    Popf,
    Sahf,
    Lahf,
    Movs,
    Cmps,
    Stos,
    Lods,
    Scas,
    Rol,
    Ror,
    Rcl,
    Rcr,
    Shl,
    Shr,
    Sar,
    Ret,
    Les,
    Lds,
    Enter,
    Leave,
    Retf,
    Int3,
    Int,
    Into,
    Iret,
    Aam,
    Aad,
    Xlat,
    Fpu,
    Loopne,
    Loope,
    Loop,
    Jecxz,
    In,
    Out,
    Call,
    Jmp,
    JmpFar,
    Hlt,
    Cmc,
    Not,
    Neg,
    Mul,
    Div,
    Idiv,
    Clc,
    Stc,
    Cli,
    Sti,
    Cld,
    Std,
    Daa,
    Das,
    Aaa,
    Aas,
    Setcc(Cond),
    Cmovcc(Cond),
    Movzx,
    Movsx,
    Bt,
    Bts,
    Btr,
    Btc,
    Shld,
    Shrd,
    Bswap,
    Cpuid,
    Rdtsc,
    Endbr32,
    Endbr64,
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mnemonic::Jcc(c) => write!(f, "j{}", c.suffix()),
            Mnemonic::Setcc(c) => write!(f, "set{}", c.suffix()),
            Mnemonic::Cmovcc(c) => write!(f, "cmov{}", c.suffix()),
            other => {
                let s = format!("{other:?}").to_lowercase();
                f.write_str(&s)
            }
        }
    }
}

/// Control-flow effect of an instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Flow {
    Next,
    Jump { target: i64 },
    CondJump { target: i64 },
    Call { target: i64 },
    IndirectCall,
    IndirectJump,
    Ret { pop: u16 },
    Halt,
}

impl Flow {
    pub fn is_branch(self) -> bool {
        !matches!(self, Flow::Next | Flow::Halt)
    }

    /// Whether execution can continue at the next sequential instruction.
    pub fn falls_through(self) -> bool {
        matches!(
            self,
            Flow::Next | Flow::CondJump { .. } | Flow::Call { .. } | Flow::IndirectCall
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedInstr {
    pub offset: usize,
    pub length: u8,
    pub opcode_id: OpcodeId,
    pub modrm: Option<u8>,
    pub sib: Option<u8>,
    /// Encoded displacement. Addresses without a base register are kept
    /// unsigned, everything else is sign-extended.
    pub displacement: Option<i64>,
    pub immediate: Option<i64>,
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
    pub flow: Flow,
    pub is_mem_access: bool,
    pub is_branch: bool,
    pub mem_operand: Option<MemOperand>,
}

impl DecodedInstr {
    pub fn end(&self) -> usize {
        self.offset + self.length as usize
    }

    /// Width of the explicit memory operand, when present.
    pub fn mem_width(&self) -> Option<Width> {
        self.operands.iter().find_map(|op| match op {
            Operand::Mem { width, .. } => Some(*width),
            _ => None,
        })
    }

    pub fn is_nop(&self) -> bool {
        self.mnemonic == Mnemonic::Nop
    }
}

impl fmt::Display for DecodedInstr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Truncated,
    Unsupported,
    TooLong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeFailure {
    pub offset: usize,
    pub reason: FailureReason,
}

/// Operand encodings from the opcode tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Arg {
    Eb,
    Ev,
    Ew,
    Gb,
    Gv,
    Sw,
    /// Memory-only ModRM operand.
    M,
    /// x87 ModRM operand.
    Est,
    Ib,
    Ibs,
    Iw,
    Iz,
    Jb,
    Jz,
    Al,
    Eax,
    Cl,
    Dx,
    One,
    /// Register from the low three opcode bits.
    Rb(u8),
    Rv(u8),
    Ob,
    Ov,
    Ap,
    Seg(u8),
}

impl Arg {
    fn needs_modrm(self) -> bool {
        matches!(self, Arg::Eb | Arg::Ev | Arg::Ew | Arg::Gb | Arg::Gv | Arg::Sw | Arg::M | Arg::Est)
    }
}

struct Form {
    mnemonic: Mnemonic,
    args: &'static [Arg],
    /// ModRM present although no operand needs it (group opcodes with no E operand).
    force_modrm: bool,
}

const fn form(mnemonic: Mnemonic, args: &'static [Arg]) -> Option<Form> {
    Some(Form { mnemonic, args, force_modrm: false })
}

const ALU: [Mnemonic; 8] = [
    Mnemonic::Add,
    Mnemonic::Or,
    Mnemonic::Adc,
    Mnemonic::Sbb,
    Mnemonic::And,
    Mnemonic::Sub,
    Mnemonic::Xor,
    Mnemonic::Cmp,
];

const SHIFT: [Mnemonic; 8] = [
    Mnemonic::Rol,
    Mnemonic::Ror,
    Mnemonic::Rcl,
    Mnemonic::Rcr,
    Mnemonic::Shl,
    Mnemonic::Shr,
    Mnemonic::Shl,
    Mnemonic::Sar,
];

fn one_byte_form(op: u8) -> Option<Form> {
    use Arg::*;
    use Mnemonic as M;
    if op < 0x40 && (op & 7) < 6 {
        let m = ALU[(op >> 3) as usize];
        return match op & 7 {
            0 => form(m, &[Eb, Gb]),
            1 => form(m, &[Ev, Gv]),
            2 => form(m, &[Gb, Eb]),
            3 => form(m, &[Gv, Ev]),
            4 => form(m, &[Al, Ib]),
            _ => form(m, &[Eax, Iz]),
        };
    }
    const REGS_V: [&[Arg]; 8] = [
        &[Arg::Rv(0)],
        &[Arg::Rv(1)],
        &[Arg::Rv(2)],
        &[Arg::Rv(3)],
        &[Arg::Rv(4)],
        &[Arg::Rv(5)],
        &[Arg::Rv(6)],
        &[Arg::Rv(7)],
    ];
    const XCHG: [&[Arg]; 8] = [
        &[Arg::Eax, Arg::Rv(0)],
        &[Arg::Eax, Arg::Rv(1)],
        &[Arg::Eax, Arg::Rv(2)],
        &[Arg::Eax, Arg::Rv(3)],
        &[Arg::Eax, Arg::Rv(4)],
        &[Arg::Eax, Arg::Rv(5)],
        &[Arg::Eax, Arg::Rv(6)],
        &[Arg::Eax, Arg::Rv(7)],
    ];
    const MOV_B: [&[Arg]; 8] = [
        &[Arg::Rb(0), Arg::Ib],
        &[Arg::Rb(1), Arg::Ib],
        &[Arg::Rb(2), Arg::Ib],
        &[Arg::Rb(3), Arg::Ib],
        &[Arg::Rb(4), Arg::Ib],
        &[Arg::Rb(5), Arg::Ib],
        &[Arg::Rb(6), Arg::Ib],
        &[Arg::Rb(7), Arg::Ib],
    ];
    const MOV_V: [&[Arg]; 8] = [
        &[Arg::Rv(0), Arg::Iz],
        &[Arg::Rv(1), Arg::Iz],
        &[Arg::Rv(2), Arg::Iz],
        &[Arg::Rv(3), Arg::Iz],
        &[Arg::Rv(4), Arg::Iz],
        &[Arg::Rv(5), Arg::Iz],
        &[Arg::Rv(6), Arg::Iz],
        &[Arg::Rv(7), Arg::Iz],
    ];
    let r = (op & 7) as usize;
    match op {
        0x06 => form(M::Push, &[Seg(0)]),
        0x07 => form(M::Pop, &[Seg(0)]),
        0x0e => form(M::Push, &[Seg(1)]),
        0x16 => form(M::Push, &[Seg(2)]),
        0x17 => form(M::Pop, &[Seg(2)]),
        0x1e => form(M::Push, &[Seg(3)]),
        0x1f => form(M::Pop, &[Seg(3)]),
        0x27 => form(M::Daa, &[]),
        0x2f => form(M::Das, &[]),
        0x37 => form(M::Aaa, &[]),
        0x3f => form(M::Aas, &[]),
        0x40..=0x47 => form(M::Inc, REGS_V[r]),
        0x48..=0x4f => form(M::Dec, REGS_V[r]),
        0x50..=0x57 => form(M::Push, REGS_V[r]),
        0x58..=0x5f => form(M::Pop, REGS_V[r]),
        0x60 => form(M::Pusha, &[]),
        0x61 => form(M::Popa, &[]),
        0x62 => form(M::Bound, &[Gv, M]),
        0x63 => form(M::Arpl, &[Ew, Gv]),
        0x68 => form(M::Push, &[Iz]),
        0x69 => form(M::Imul, &[Gv, Ev, Iz]),
        0x6a => form(M::Push, &[Ibs]),
        0x6b => form(M::Imul, &[Gv, Ev, Ibs]),
        0x6c | 0x6d => form(M::Ins, &[]),
        0x6e | 0x6f => form(M::Outs, &[]),
        0x70..=0x7f => form(M::Jcc(Cond::from_bits(op)), &[Jb]),
        0x84 => form(M::Test, &[Eb, Gb]),
        0x85 => form(M::Test, &[Ev, Gv]),
        0x86 => form(M::Xchg, &[Eb, Gb]),
        0x87 => form(M::Xchg, &[Ev, Gv]),
        0x88 => form(M::Mov, &[Eb, Gb]),
        0x89 => form(M::Mov, &[Ev, Gv]),
        0x8a => form(M::Mov, &[Gb, Eb]),
        0x8b => form(M::Mov, &[Gv, Ev]),
        0x8c => form(M::Mov, &[Ew, Sw]),
        0x8d => form(M::Lea, &[Gv, M]),
        0x8e => form(M::Mov, &[Sw, Ew]),
        0x90 => form(M::Nop, &[]),
        0x91..=0x97 => form(M::Xchg, XCHG[r]),
        0x98 => form(M::Cwde, &[]),
        0x99 => form(M::Cdq, &[]),
        0x9a => form(M::CallFar, &[Ap]),
        0x9b => form(M::Wait, &[]),
        0x9c => form(M::Pushf, &[]),
        0x9d => form(M::Popf, &[]),
        0x9e => form(M::Sahf, &[]),
        0x9f => form(M::Lahf, &[]),
        0xa0 => form(M::Mov, &[Al, Ob]),
        0xa1 => form(M::Mov, &[Eax, Ov]),
        0xa2 => form(M::Mov, &[Ob, Al]),
        0xa3 => form(M::Mov, &[Ov, Eax]),
        0xa4 | 0xa5 => form(M::Movs, &[]),
        0xa6 | 0xa7 => form(M::Cmps, &[]),
        0xa8 => form(M::Test, &[Al, Ib]),
        0xa9 => form(M::Test, &[Eax, Iz]),
        0xaa | 0xab => form(M::Stos, &[]),
        0xac | 0xad => form(M::Lods, &[]),
        0xae | 0xaf => form(M::Scas, &[]),
        0xb0..=0xb7 => form(M::Mov, MOV_B[r]),
        0xb8..=0xbf => form(M::Mov, MOV_V[r]),
        0xc2 => form(M::Ret, &[Iw]),
        0xc3 => form(M::Ret, &[]),
        0xc4 => form(M::Les, &[Gv, M]),
        0xc5 => form(M::Lds, &[Gv, M]),
        0xc8 => form(M::Enter, &[Iw, Ib]),
        0xc9 => form(M::Leave, &[]),
        0xca => form(M::Retf, &[Iw]),
        0xcb => form(M::Retf, &[]),
        0xcc => form(M::Int3, &[]),
        0xcd => form(M::Int, &[Ib]),
        0xce => form(M::Into, &[]),
        0xcf => form(M::Iret, &[]),
        0xd4 => form(M::Aam, &[Ib]),
        0xd5 => form(M::Aad, &[Ib]),
        0xd7 => form(M::Xlat, &[]),
        0xd8..=0xdf => form(M::Fpu, &[Est]),
        0xe0 => form(M::Loopne, &[Jb]),
        0xe1 => form(M::Loope, &[Jb]),
        0xe2 => form(M::Loop, &[Jb]),
        0xe3 => form(M::Jecxz, &[Jb]),
        0xe4 => form(M::In, &[Al, Ib]),
        0xe5 => form(M::In, &[Eax, Ib]),
        0xe6 => form(M::Out, &[Ib, Al]),
        0xe7 => form(M::Out, &[Ib, Eax]),
        0xe8 => form(M::Call, &[Jz]),
        0xe9 => form(M::Jmp, &[Jz]),
        0xea => form(M::JmpFar, &[Ap]),
        0xeb => form(M::Jmp, &[Jb]),
        0xec => form(M::In, &[Al, Dx]),
        0xed => form(M::In, &[Eax, Dx]),
        0xee => form(M::Out, &[Dx, Al]),
        0xef => form(M::Out, &[Dx, Eax]),
        0xf4 => form(M::Hlt, &[]),
        0xf5 => form(M::Cmc, &[]),
        0xf8 => form(M::Clc, &[]),
        0xf9 => form(M::Stc, &[]),
        0xfa => form(M::Cli, &[]),
        0xfb => form(M::Sti, &[]),
        0xfc => form(M::Cld, &[]),
        0xfd => form(M::Std, &[]),
        _ => None,
    }
}

/// Group opcodes whose ModRM.reg field extends the opcode.
fn group_form(op: u8, reg: u8) -> Option<Form> {
    use Arg::*;
    use Mnemonic as M;
    let reg_u = reg as usize;
    match op {
        0x80 | 0x82 => form(ALU[reg_u], &[Eb, Ib]),
        0x81 => form(ALU[reg_u], &[Ev, Iz]),
        0x83 => form(ALU[reg_u], &[Ev, Ibs]),
        0x8f if reg == 0 => form(M::Pop, &[Ev]),
        0xc0 => form(SHIFT[reg_u], &[Eb, Ib]),
        0xc1 => form(SHIFT[reg_u], &[Ev, Ib]),
        0xc6 if reg == 0 => form(M::Mov, &[Eb, Ib]),
        0xc7 if reg == 0 => form(M::Mov, &[Ev, Iz]),
        0xd0 => form(SHIFT[reg_u], &[Eb, One]),
        0xd1 => form(SHIFT[reg_u], &[Ev, One]),
        0xd2 => form(SHIFT[reg_u], &[Eb, Cl]),
        0xd3 => form(SHIFT[reg_u], &[Ev, Cl]),
        0xf6 => match reg {
            0 | 1 => form(M::Test, &[Eb, Ib]),
            _ => form(
                [M::Test, M::Test, M::Not, M::Neg, M::Mul, M::Imul, M::Div, M::Idiv][reg_u],
                &[Eb],
            ),
        },
        0xf7 => match reg {
            0 | 1 => form(M::Test, &[Ev, Iz]),
            _ => form(
                [M::Test, M::Test, M::Not, M::Neg, M::Mul, M::Imul, M::Div, M::Idiv][reg_u],
                &[Ev],
            ),
        },
        0xfe => match reg {
            0 => form(M::Inc, &[Eb]),
            1 => form(M::Dec, &[Eb]),
            _ => None,
        },
        0xff => match reg {
            0 => form(M::Inc, &[Ev]),
            1 => form(M::Dec, &[Ev]),
            2 => form(M::Call, &[Ev]),
            3 => form(M::CallFar, &[M]),
            4 => form(M::Jmp, &[Ev]),
            5 => form(M::JmpFar, &[M]),
            6 => form(M::Push, &[Ev]),
            _ => None,
        },
        _ => None,
    }
}

fn two_byte_form(op: u8) -> Option<Form> {
    use Arg::*;
    use Mnemonic as M;
    match op {
        0x1f => form(M::Nop, &[Ev]),
        0x31 => form(M::Rdtsc, &[]),
        0x40..=0x4f => form(M::Cmovcc(Cond::from_bits(op)), &[Gv, Ev]),
        0x80..=0x8f => form(M::Jcc(Cond::from_bits(op)), &[Jz]),
        0x90..=0x9f => form(M::Setcc(Cond::from_bits(op)), &[Eb]),
        0xa2 => form(M::Cpuid, &[]),
        0xa3 => form(M::Bt, &[Ev, Gv]),
        0xa4 => form(M::Shld, &[Ev, Gv, Ib]),
        0xa5 => form(M::Shld, &[Ev, Gv, Cl]),
        0xab => form(M::Bts, &[Ev, Gv]),
        0xac => form(M::Shrd, &[Ev, Gv, Ib]),
        0xad => form(M::Shrd, &[Ev, Gv, Cl]),
        0xaf => form(M::Imul, &[Gv, Ev]),
        0xb3 => form(M::Btr, &[Ev, Gv]),
        0xb6 => form(M::Movzx, &[Gv, Eb]),
        0xb7 => form(M::Movzx, &[Gv, Ew]),
        0xbb => form(M::Btc, &[Ev, Gv]),
        0xbe => form(M::Movsx, &[Gv, Eb]),
        0xbf => form(M::Movsx, &[Gv, Ew]),
        0xc8..=0xcf => {
            const R: [&[Arg]; 8] = [
                &[Arg::Rv(0)],
                &[Arg::Rv(1)],
                &[Arg::Rv(2)],
                &[Arg::Rv(3)],
                &[Arg::Rv(4)],
                &[Arg::Rv(5)],
                &[Arg::Rv(6)],
                &[Arg::Rv(7)],
            ];
            form(M::Bswap, R[(op & 7) as usize])
        }
        _ => None,
    }
}

fn two_byte_group_form(op: u8, reg: u8) -> Option<Form> {
    use Arg::*;
    match (op, reg) {
        (0xba, 4) => form(Mnemonic::Bt, &[Ev, Ib]),
        (0xba, 5) => form(Mnemonic::Bts, &[Ev, Ib]),
        (0xba, 6) => form(Mnemonic::Btr, &[Ev, Ib]),
        (0xba, 7) => form(Mnemonic::Btc, &[Ev, Ib]),
        _ => None,
    }
}

struct Reader<'a> {
    code: &'a [u8],
    start: usize,
    pos: usize,
}

impl Reader<'_> {
    fn u8(&mut self) -> Result<u8, FailureReason> {
        if self.pos - self.start >= MAX_INSTR_LEN {
            return Err(FailureReason::TooLong);
        }
        let b = *self.code.get(self.pos).ok_or(FailureReason::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn peek(&self) -> Option<u8> {
        self.code.get(self.pos).copied()
    }

    fn le(&mut self, n: usize) -> Result<u32, FailureReason> {
        let mut v = 0u32;
        for k in 0..n {
            v |= (self.u8()? as u32) << (8 * k);
        }
        Ok(v)
    }
}

#[derive(Default)]
struct Prefixes {
    opsize: bool,
    addrsize: bool,
    rep: bool,
}

struct ModRm {
    byte: u8,
    sib: Option<u8>,
    /// `None` for register-direct forms.
    mem: Option<MemOperand>,
    disp: Option<i64>,
}

impl ModRm {
    fn reg(&self) -> u8 {
        (self.byte >> 3) & 7
    }
    fn rm(&self) -> u8 {
        self.byte & 7
    }
}

fn read_modrm(r: &mut Reader<'_>, addr16: bool) -> Result<ModRm, FailureReason> {
    let byte = r.u8()?;
    let md = byte >> 6;
    let rm = byte & 7;
    if md == 3 {
        return Ok(ModRm { byte, sib: None, mem: None, disp: None });
    }
    if addr16 {
        let disp = match (md, rm) {
            (0, 6) => Some(r.le(2)? as i64),
            (0, _) => None,
            (1, _) => Some(r.u8()? as i8 as i64),
            _ => Some(r.le(2)? as u16 as i16 as i64),
        };
        let mem = MemOperand { base: None, index: None, scale: 1, disp: disp.unwrap_or(0), addr16: true };
        return Ok(ModRm { byte, sib: None, mem: Some(mem), disp });
    }
    let mut sib = None;
    let mut base = Some(Reg::from_index(rm));
    let mut index = None;
    let mut scale = 1u8;
    let mut absolute = false;
    if rm == 4 {
        let s = r.u8()?;
        sib = Some(s);
        scale = 1 << (s >> 6);
        let idx = (s >> 3) & 7;
        if idx != 4 {
            index = Some(Reg::from_index(idx));
        }
        let b = s & 7;
        if b == 5 && md == 0 {
            base = None;
            absolute = true;
        } else {
            base = Some(Reg::from_index(b));
        }
    } else if rm == 5 && md == 0 {
        base = None;
        absolute = true;
    }
    let disp = if absolute {
        Some(r.le(4)? as i64)
    } else {
        match md {
            1 => Some(r.u8()? as i8 as i64),
            2 => Some(r.le(4)? as i32 as i64),
            _ => None,
        }
    };
    let mem = MemOperand { base, index, scale, disp: disp.unwrap_or(0), addr16: false };
    Ok(ModRm { byte, sib, mem: Some(mem), disp })
}

/// Decode one instruction starting at `offset` of `code`.
///
/// Decoding never reads past the end of `code`, so callers that must not
/// decode across a section gap pass the section slice.
pub fn decode_at(code: &[u8], offset: usize) -> Result<DecodedInstr, DecodeFailure> {
    decode_inner(code, offset).map_err(|reason| DecodeFailure { offset, reason })
}

fn decode_inner(code: &[u8], offset: usize) -> Result<DecodedInstr, FailureReason> {
    if offset >= code.len() {
        return Err(FailureReason::Truncated);
    }
    let mut r = Reader { code, start: offset, pos: offset };
    let mut pfx = Prefixes::default();
    let mut op;
    loop {
        op = r.u8()?;
        match op {
            0x66 => pfx.opsize = true,
            0x67 => pfx.addrsize = true,
            0xf3 => pfx.rep = true,
            0xf2 | 0xf0 | 0x26 | 0x2e | 0x36 | 0x3e | 0x64 | 0x65 => {}
            _ => break,
        }
    }

    let (opcode_id, form, modrm) = if op == 0x0f {
        let op2 = r.u8()?;
        if op2 == 0x1e {
            // ENDBR32/ENDBR64 live in the reserved-NOP space; other encodings
            // are hint NOPs with a ModRM operand.
            let m = read_modrm(&mut r, pfx.addrsize)?;
            let id = match (pfx.rep, m.byte) {
                (true, 0xfb) => opcode::ENDBR32,
                (true, 0xfa) => opcode::ENDBR64,
                _ => opcode::two_byte(op2),
            };
            let mnemonic = match id {
                opcode::ENDBR32 => Mnemonic::Endbr32,
                opcode::ENDBR64 => Mnemonic::Endbr64,
                _ => Mnemonic::Nop,
            };
            let args: &'static [Arg] = if mnemonic == Mnemonic::Nop { &[Arg::Ev] } else { &[] };
            (id, Form { mnemonic, args, force_modrm: true }, Some(m))
        } else if let Some(gslot) = opcode::two_byte_group_slot(op2) {
            let m = read_modrm(&mut r, pfx.addrsize)?;
            let f = two_byte_group_form(op2, m.reg()).ok_or(FailureReason::Unsupported)?;
            (opcode::group(gslot, m.reg()), f, Some(m))
        } else {
            let f = two_byte_form(op2).ok_or(FailureReason::Unsupported)?;
            let m = if f.args.iter().any(|a| a.needs_modrm()) {
                Some(read_modrm(&mut r, pfx.addrsize)?)
            } else {
                None
            };
            (opcode::two_byte(op2), f, m)
        }
    } else if let Some(gslot) = opcode::one_byte_group_slot(op) {
        let m = read_modrm(&mut r, pfx.addrsize)?;
        let f = group_form(op, m.reg()).ok_or(FailureReason::Unsupported)?;
        (opcode::group(gslot, m.reg()), f, Some(m))
    } else {
        let f = one_byte_form(op).ok_or(FailureReason::Unsupported)?;
        let m = if f.force_modrm || f.args.iter().any(|a| a.needs_modrm()) {
            Some(read_modrm(&mut r, pfx.addrsize)?)
        } else {
            None
        };
        (opcode::one_byte(op), f, m)
    };

    let vsize = if pfx.opsize { Width::Word } else { Width::Dword };
    let mut operands = Vec::with_capacity(form.args.len());
    let mut immediate = None;
    let mut displacement = modrm.as_ref().and_then(|m| m.disp);
    let mut mem_operand = modrm.as_ref().and_then(|m| m.mem);
    let mut flow = Flow::Next;

    let e_operand = |m: &ModRm, width: Width| -> Operand {
        match m.mem {
            Some(mem) => Operand::Mem { mem, width },
            None => Operand::Reg(Gpr { index: m.rm(), width }),
        }
    };

    for &arg in form.args {
        let operand = match arg {
            Arg::Eb | Arg::Ev | Arg::Ew | Arg::M | Arg::Est => {
                let m = modrm.as_ref().expect("modrm read for E operand");
                if arg == Arg::M && m.mem.is_none() {
                    return Err(FailureReason::Unsupported);
                }
                match arg {
                    Arg::Eb => e_operand(m, Width::Byte),
                    Arg::Ev => e_operand(m, vsize),
                    Arg::Ew => e_operand(m, Width::Word),
                    Arg::Est => match m.mem {
                        Some(mem) => Operand::Mem { mem, width: Width::Other },
                        None => Operand::St { index: m.rm() },
                    },
                    _ => {
                        let width = if form.mnemonic == Mnemonic::Lea { vsize } else { Width::Other };
                        Operand::Mem { mem: m.mem.unwrap(), width }
                    }
                }
            }
            Arg::Gb => Operand::Reg(Gpr { index: modrm.as_ref().unwrap().reg(), width: Width::Byte }),
            Arg::Gv => Operand::Reg(Gpr { index: modrm.as_ref().unwrap().reg(), width: vsize }),
            Arg::Sw => {
                let idx = modrm.as_ref().unwrap().reg();
                if idx > 5 {
                    return Err(FailureReason::Unsupported);
                }
                Operand::Seg { index: idx }
            }
            Arg::Ib => {
                let v = r.u8()? as i64;
                immediate.get_or_insert(v);
                Operand::Imm { value: v }
            }
            Arg::Ibs => {
                let v = r.u8()? as i8 as i64;
                immediate.get_or_insert(v);
                Operand::Imm { value: v }
            }
            Arg::Iw => {
                let v = r.le(2)? as i64;
                immediate.get_or_insert(v);
                Operand::Imm { value: v }
            }
            Arg::Iz => {
                let v = if pfx.opsize { r.le(2)? as u16 as i16 as i64 } else { r.le(4)? as i32 as i64 };
                immediate.get_or_insert(v);
                Operand::Imm { value: v }
            }
            Arg::Jb | Arg::Jz => {
                let rel = match arg {
                    Arg::Jb => r.u8()? as i8 as i64,
                    _ if pfx.opsize => r.le(2)? as u16 as i16 as i64,
                    _ => r.le(4)? as i32 as i64,
                };
                let target = r.pos as i64 + rel;
                flow = match form.mnemonic {
                    Mnemonic::Call => Flow::Call { target },
                    Mnemonic::Jmp => Flow::Jump { target },
                    _ => Flow::CondJump { target },
                };
                Operand::Rel { target }
            }
            Arg::Al => Operand::Reg(Gpr { index: 0, width: Width::Byte }),
            Arg::Eax => Operand::Reg(Gpr { index: 0, width: vsize }),
            Arg::Cl => Operand::Reg(Gpr { index: 1, width: Width::Byte }),
            Arg::Dx => Operand::Reg(Gpr { index: 2, width: Width::Word }),
            Arg::One => Operand::Imm { value: 1 },
            Arg::Rb(i) => Operand::Reg(Gpr { index: i, width: Width::Byte }),
            Arg::Rv(i) => Operand::Reg(Gpr { index: i, width: vsize }),
            Arg::Ob | Arg::Ov => {
                let addr = if pfx.addrsize { r.le(2)? } else { r.le(4)? };
                let mem = MemOperand {
                    base: None,
                    index: None,
                    scale: 1,
                    disp: addr as i64,
                    addr16: pfx.addrsize,
                };
                displacement = Some(addr as i64);
                mem_operand = Some(mem);
                let width = if arg == Arg::Ob { Width::Byte } else { vsize };
                Operand::Mem { mem, width }
            }
            Arg::Ap => {
                let off = if pfx.opsize { r.le(2)? } else { r.le(4)? };
                let _selector = r.le(2)?;
                immediate.get_or_insert(off as i64);
                Operand::Imm { value: off as i64 }
            }
            Arg::Seg(i) => Operand::Seg { index: i },
        };
        operands.push(operand);
    }

    // Absolute addresses (no base register) are kept unsigned.
    if let (Some(m), Some(d)) = (mem_operand.as_mut(), displacement.as_mut()) {
        if m.base.is_none() && !m.addr16 {
            *d = *d as u32 as i64;
            m.disp = *d;
        }
    }

    match form.mnemonic {
        Mnemonic::Ret | Mnemonic::Retf | Mnemonic::Iret => {
            flow = Flow::Ret { pop: immediate.unwrap_or(0) as u16 };
        }
        Mnemonic::Call if flow == Flow::Next => flow = Flow::IndirectCall,
        Mnemonic::CallFar => flow = Flow::IndirectCall,
        Mnemonic::Jmp if flow == Flow::Next => flow = Flow::IndirectJump,
        Mnemonic::JmpFar => flow = Flow::IndirectJump,
        Mnemonic::Hlt => flow = Flow::Halt,
        _ => {}
    }

    // Only explicit operands count as memory accesses; address computation and
    // hint NOPs do not touch memory.
    let explicit_mem = operands.iter().any(|o| matches!(o, Operand::Mem { .. }));
    let is_mem_access = explicit_mem && !matches!(form.mnemonic, Mnemonic::Lea | Mnemonic::Nop);
    if !is_mem_access {
        mem_operand = None;
    }

    let _ = r.peek();
    let length = r.pos - offset;
    debug_assert!(length <= MAX_INSTR_LEN);
    Ok(DecodedInstr {
        offset,
        length: length as u8,
        opcode_id,
        modrm: modrm.as_ref().map(|m| m.byte),
        sib: modrm.as_ref().and_then(|m| m.sib),
        displacement,
        immediate,
        mnemonic: form.mnemonic,
        operands,
        is_branch: flow.is_branch(),
        flow,
        is_mem_access,
        mem_operand,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dec(bytes: &[u8]) -> DecodedInstr {
        decode_at(bytes, 0).unwrap()
    }

    #[test]
    fn mov_ebp_relative_store() {
        let i = dec(&[0xc7, 0x45, 0xf4, 0, 0, 0, 0]);
        assert_eq!(i.length, 7);
        assert_eq!(i.mnemonic, Mnemonic::Mov);
        assert_eq!(i.opcode_id, opcode::group(opcode::one_byte_group_slot(0xc7).unwrap(), 0));
        assert_eq!(i.modrm, Some(0x45));
        assert_eq!(i.sib, None);
        assert_eq!(i.displacement, Some(-12));
        assert!(i.is_mem_access);
        assert_eq!(i.mem_operand, Some(MemOperand::based(Reg::Ebp, -12)));
        assert_eq!(i.to_string(), "mov dword [ebp-0xc], 0x0");
    }

    #[test]
    fn nop_has_no_fields() {
        let i = dec(&[0x90]);
        assert_eq!((i.length, i.modrm, i.sib, i.displacement), (1, None, None, None));
        assert!(!i.is_mem_access && !i.is_branch);
    }

    #[test]
    fn ud2_fails() {
        let err = decode_at(&[0x0f, 0x0b], 0).unwrap_err();
        assert_eq!(err, DecodeFailure { offset: 0, reason: FailureReason::Unsupported });
    }

    #[test]
    fn sib_scaled_absolute() {
        // mov [eax*8+0x804a018], edx
        let i = dec(&[0x89, 0x14, 0xc5, 0x18, 0xa0, 0x04, 0x08]);
        assert_eq!(i.sib, Some(0xc5));
        assert_eq!(i.displacement, Some(0x804a018));
        let m = i.mem_operand.unwrap();
        assert_eq!((m.base, m.index, m.scale), (None, Some(Reg::Eax), 8));
    }

    #[test]
    fn branches_resolve_targets() {
        let i = decode_at(&[0x90, 0x90, 0x7e, 0xfc], 2).unwrap();
        assert_eq!(i.flow, Flow::CondJump { target: 0 });
        assert!(i.is_branch);
        let call = dec(&[0xe8, 0x10, 0, 0, 0]);
        assert_eq!(call.flow, Flow::Call { target: 0x15 });
        let ret = dec(&[0xc2, 0x08, 0x00]);
        assert_eq!(ret.flow, Flow::Ret { pop: 8 });
        let ind = dec(&[0xff, 0xe0]);
        assert_eq!(ind.flow, Flow::IndirectJump);
    }

    #[test]
    fn prefixes_affect_length_only() {
        // mov ax, 0x1234
        let i = dec(&[0x66, 0xb8, 0x34, 0x12]);
        assert_eq!(i.length, 4);
        assert_eq!(i.opcode_id, opcode::one_byte(0xb8));
        let endbr = dec(&[0xf3, 0x0f, 0x1e, 0xfb]);
        assert_eq!(endbr.opcode_id, opcode::ENDBR32);
        assert_eq!(endbr.mnemonic, Mnemonic::Endbr32);
    }

    #[test]
    fn truncation_and_length_limit() {
        assert_eq!(decode_at(&[0xc7, 0x45], 0).unwrap_err().reason, FailureReason::Truncated);
        let mut long = vec![0x66u8; 15];
        long.push(0x90);
        assert_eq!(decode_at(&long, 0).unwrap_err().reason, FailureReason::TooLong);
    }

    #[test]
    fn lea_is_not_memory_access() {
        let i = dec(&[0x8d, 0x45, 0xf0]);
        assert!(!i.is_mem_access);
        assert_eq!(i.mem_operand, None);
        assert_eq!(i.displacement, Some(-16));
    }

    #[test]
    fn moffs_load() {
        let i = dec(&[0xa1, 0x28, 0xa0, 0x04, 0x08]);
        assert_eq!(i.mem_operand, Some(MemOperand::absolute(0x804a028)));
        assert_eq!(i.modrm, None);
        assert!(i.is_mem_access);
    }

    #[test]
    fn vex_space_fails() {
        assert!(decode_at(&[0xc5, 0xf8, 0x77], 0).is_err());
    }
}
