//! A small IA-32 assembler for the instruction forms that `-O0` compiler
//! output uses. Memory operands always take the shortest displacement form.

use crate::superset::x86::{Cond, Reg};

/// `[base + index*scale + disp]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mem {
    pub base: Option<Reg>,
    pub index: Option<(Reg, u8)>,
    pub disp: i32,
}

impl Mem {
    pub fn base(base: Reg, disp: i32) -> Mem {
        Mem { base: Some(base), index: None, disp }
    }

    pub fn abs(addr: u32) -> Mem {
        Mem { base: None, index: None, disp: addr as i32 }
    }

    pub fn indexed(index: Reg, scale: u8, disp: i32) -> Mem {
        Mem { base: None, index: Some((index, scale)), disp }
    }

    pub fn based_indexed(base: Reg, index: Reg, scale: u8, disp: i32) -> Mem {
        Mem { base: Some(base), index: Some((index, scale)), disp }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alu {
    Add = 0,
    Or = 1,
    And = 4,
    Sub = 5,
    Xor = 6,
    Cmp = 7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Label(usize);

#[derive(Clone, Copy, Debug)]
enum Rel {
    Rel8,
    Rel32,
}

#[derive(Debug)]
struct Fixup {
    at: usize,
    label: Label,
    kind: Rel,
}

#[derive(Debug, Default)]
pub struct Asm {
    code: Vec<u8>,
    labels: Vec<Option<usize>>,
    fixups: Vec<Fixup>,
}

fn scale_bits(scale: u8) -> u8 {
    match scale {
        1 => 0,
        2 => 1,
        4 => 2,
        8 => 3,
        _ => panic!("invalid scale {scale}"),
    }
}

fn fits_i8(v: i32) -> bool {
    (-128..=127).contains(&v)
}

impl Asm {
    pub fn new() -> Asm {
        Asm::default()
    }

    pub fn pos(&self) -> usize {
        self.code.len()
    }

    pub fn label(&mut self) -> Label {
        self.labels.push(None);
        Label(self.labels.len() - 1)
    }

    pub fn bind(&mut self, l: Label) {
        assert!(self.labels[l.0].is_none(), "label bound twice");
        self.labels[l.0] = Some(self.code.len());
    }

    pub fn here(&mut self) -> Label {
        let l = self.label();
        self.bind(l);
        l
    }

    pub fn offset_of(&self, l: Label) -> Option<usize> {
        self.labels[l.0]
    }

    /// Resolve all branch fixups and return the code.
    pub fn finish(mut self) -> Vec<u8> {
        for f in std::mem::take(&mut self.fixups) {
            let target = self.labels[f.label.0].expect("unbound label") as i64;
            match f.kind {
                Rel::Rel8 => {
                    let rel = target - (f.at as i64 + 1);
                    let rel = i8::try_from(rel).expect("short branch out of range");
                    self.code[f.at] = rel as u8;
                }
                Rel::Rel32 => {
                    let rel = (target - (f.at as i64 + 4)) as i32;
                    self.code[f.at..f.at + 4].copy_from_slice(&rel.to_le_bytes());
                }
            }
        }
        self.code
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.code.extend_from_slice(bytes);
    }

    fn imm32(&mut self, v: i32) {
        self.code.extend_from_slice(&v.to_le_bytes());
    }

    fn modrm_reg(&mut self, reg: u8, rm: Reg) {
        self.code.push(0xc0 | (reg << 3) | rm as u8);
    }

    fn modrm_mem(&mut self, reg: u8, m: Mem) {
        let reg = reg << 3;
        match (m.base, m.index) {
            (None, None) => {
                self.code.push(reg | 0b101);
                self.imm32(m.disp);
            }
            (None, Some((idx, scale))) => {
                assert!(idx != Reg::Esp, "esp cannot be an index");
                self.code.push(reg | 0b100);
                self.code.push((scale_bits(scale) << 6) | ((idx as u8) << 3) | 0b101);
                self.imm32(m.disp);
            }
            (Some(base), index) => {
                let md = if m.disp == 0 && base != Reg::Ebp {
                    0b00
                } else if fits_i8(m.disp) {
                    0b01
                } else {
                    0b10
                };
                if index.is_none() && base != Reg::Esp {
                    self.code.push((md << 6) | reg | base as u8);
                } else {
                    let (idx, scale) = index.unwrap_or((Reg::Esp, 1));
                    self.code.push((md << 6) | reg | 0b100);
                    self.code.push((scale_bits(scale) << 6) | ((idx as u8) << 3) | base as u8);
                }
                match md {
                    0b01 => self.code.push(m.disp as i8 as u8),
                    0b10 => self.imm32(m.disp),
                    _ => {}
                }
            }
        }
    }

    pub fn push_r(&mut self, r: Reg) {
        self.code.push(0x50 + r as u8);
    }

    pub fn pop_r(&mut self, r: Reg) {
        self.code.push(0x58 + r as u8);
    }

    pub fn push_imm(&mut self, v: i32) {
        if fits_i8(v) {
            self.raw(&[0x6a, v as i8 as u8]);
        } else {
            self.code.push(0x68);
            self.imm32(v);
        }
    }

    pub fn push_m(&mut self, m: Mem) {
        self.code.push(0xff);
        self.modrm_mem(6, m);
    }

    pub fn mov_rr(&mut self, dst: Reg, src: Reg) {
        self.code.push(0x89);
        self.modrm_reg(src as u8, dst);
    }

    pub fn mov_ri(&mut self, dst: Reg, v: i32) {
        self.code.push(0xb8 + dst as u8);
        self.imm32(v);
    }

    pub fn mov_rm(&mut self, dst: Reg, m: Mem) {
        if dst == Reg::Eax && m.base.is_none() && m.index.is_none() {
            self.code.push(0xa1);
            self.imm32(m.disp);
            return;
        }
        self.code.push(0x8b);
        self.modrm_mem(dst as u8, m);
    }

    pub fn mov_mr(&mut self, m: Mem, src: Reg) {
        if src == Reg::Eax && m.base.is_none() && m.index.is_none() {
            self.code.push(0xa3);
            self.imm32(m.disp);
            return;
        }
        self.code.push(0x89);
        self.modrm_mem(src as u8, m);
    }

    pub fn mov_mi(&mut self, m: Mem, v: i32) {
        self.code.push(0xc7);
        self.modrm_mem(0, m);
        self.imm32(v);
    }

    pub fn movb_mi(&mut self, m: Mem, v: u8) {
        self.code.push(0xc6);
        self.modrm_mem(0, m);
        self.code.push(v);
    }

    pub fn movzx_rm8(&mut self, dst: Reg, m: Mem) {
        self.raw(&[0x0f, 0xb6]);
        self.modrm_mem(dst as u8, m);
    }

    pub fn movsx_rm8(&mut self, dst: Reg, m: Mem) {
        self.raw(&[0x0f, 0xbe]);
        self.modrm_mem(dst as u8, m);
    }

    pub fn lea(&mut self, dst: Reg, m: Mem) {
        self.code.push(0x8d);
        self.modrm_mem(dst as u8, m);
    }

    pub fn alu_ri(&mut self, op: Alu, dst: Reg, v: i32) {
        if fits_i8(v) {
            self.code.push(0x83);
            self.modrm_reg(op as u8, dst);
            self.code.push(v as i8 as u8);
        } else {
            self.code.push(0x81);
            self.modrm_reg(op as u8, dst);
            self.imm32(v);
        }
    }

    pub fn alu_mi(&mut self, op: Alu, m: Mem, v: i32) {
        if fits_i8(v) {
            self.code.push(0x83);
            self.modrm_mem(op as u8, m);
            self.code.push(v as i8 as u8);
        } else {
            self.code.push(0x81);
            self.modrm_mem(op as u8, m);
            self.imm32(v);
        }
    }

    pub fn alu_rr(&mut self, op: Alu, dst: Reg, src: Reg) {
        self.code.push(((op as u8) << 3) | 0x01);
        self.modrm_reg(src as u8, dst);
    }

    /// `op dst, [m]`
    pub fn alu_rm(&mut self, op: Alu, dst: Reg, m: Mem) {
        self.code.push(((op as u8) << 3) | 0x03);
        self.modrm_mem(dst as u8, m);
    }

    /// `op [m], src`
    pub fn alu_mr(&mut self, op: Alu, m: Mem, src: Reg) {
        self.code.push(((op as u8) << 3) | 0x01);
        self.modrm_mem(src as u8, m);
    }

    pub fn test_rr(&mut self, a: Reg, b: Reg) {
        self.code.push(0x85);
        self.modrm_reg(b as u8, a);
    }

    pub fn inc_r(&mut self, r: Reg) {
        self.code.push(0x40 + r as u8);
    }

    pub fn dec_r(&mut self, r: Reg) {
        self.code.push(0x48 + r as u8);
    }

    pub fn inc_m(&mut self, m: Mem) {
        self.code.push(0xff);
        self.modrm_mem(0, m);
    }

    pub fn dec_m(&mut self, m: Mem) {
        self.code.push(0xff);
        self.modrm_mem(1, m);
    }

    pub fn imul_rri(&mut self, dst: Reg, src: Reg, v: i32) {
        if fits_i8(v) {
            self.code.push(0x6b);
            self.modrm_reg(dst as u8, src);
            self.code.push(v as i8 as u8);
        } else {
            self.code.push(0x69);
            self.modrm_reg(dst as u8, src);
            self.imm32(v);
        }
    }

    pub fn shl_ri(&mut self, dst: Reg, n: u8) {
        self.code.push(0xc1);
        self.modrm_reg(4, dst);
        self.code.push(n);
    }

    pub fn cdq(&mut self) {
        self.code.push(0x99);
    }

    pub fn idiv_m(&mut self, m: Mem) {
        self.code.push(0xf7);
        self.modrm_mem(7, m);
    }

    pub fn jmp(&mut self, l: Label) {
        self.code.push(0xe9);
        self.fixup(l, Rel::Rel32);
    }

    pub fn jmp_short(&mut self, l: Label) {
        self.code.push(0xeb);
        self.fixup(l, Rel::Rel8);
    }

    pub fn jcc(&mut self, c: Cond, l: Label) {
        self.raw(&[0x0f, 0x80 + c as u8]);
        self.fixup(l, Rel::Rel32);
    }

    pub fn jcc_short(&mut self, c: Cond, l: Label) {
        self.code.push(0x70 + c as u8);
        self.fixup(l, Rel::Rel8);
    }

    pub fn call(&mut self, l: Label) {
        self.code.push(0xe8);
        self.fixup(l, Rel::Rel32);
    }

    pub fn call_r(&mut self, r: Reg) {
        self.code.push(0xff);
        self.modrm_reg(2, r);
    }

    pub fn jmp_m(&mut self, m: Mem) {
        self.code.push(0xff);
        self.modrm_mem(4, m);
    }

    pub fn ret(&mut self) {
        self.code.push(0xc3);
    }

    pub fn ret_imm(&mut self, n: u16) {
        self.code.push(0xc2);
        self.code.extend_from_slice(&n.to_le_bytes());
    }

    pub fn leave(&mut self) {
        self.code.push(0xc9);
    }

    pub fn nop(&mut self) {
        self.code.push(0x90);
    }

    /// Pad with single-byte NOPs up to a multiple of `n`.
    pub fn align(&mut self, n: usize) {
        while self.code.len() % n != 0 {
            self.nop();
        }
    }

    fn fixup(&mut self, label: Label, kind: Rel) {
        let at = self.code.len();
        let width = match kind {
            Rel::Rel8 => 1,
            Rel::Rel32 => 4,
        };
        self.code.extend(std::iter::repeat_n(0, width));
        self.fixups.push(Fixup { at, label, kind });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_frame_and_sib_forms() {
        let mut a = Asm::new();
        a.push_r(Reg::Ebp);
        a.mov_rr(Reg::Ebp, Reg::Esp);
        a.alu_ri(Alu::Sub, Reg::Esp, 0x18);
        a.mov_mi(Mem::base(Reg::Ebp, -12), 0);
        a.mov_rm(Reg::Ecx, Mem::indexed(Reg::Eax, 8, 0x804a018));
        a.mov_mr(Mem::base(Reg::Esp, 0), Reg::Eax);
        a.mov_rm(Reg::Eax, Mem::abs(0x804a028));
        assert_eq!(
            a.finish(),
            vec![
                0x55, 0x89, 0xe5, 0x83, 0xec, 0x18, 0xc7, 0x45, 0xf4, 0, 0, 0, 0, 0x8b, 0x0c, 0xc5,
                0x18, 0xa0, 0x04, 0x08, 0x89, 0x04, 0x24, 0xa1, 0x28, 0xa0, 0x04, 0x08
            ]
        );
    }

    #[test]
    fn ebp_base_always_has_displacement() {
        let mut a = Asm::new();
        a.mov_rm(Reg::Eax, Mem::base(Reg::Ebp, 0));
        assert_eq!(a.finish(), vec![0x8b, 0x45, 0x00]);
    }

    #[test]
    fn branches_resolve_both_directions() {
        let mut a = Asm::new();
        let top = a.here();
        let out = a.label();
        a.jcc_short(Cond::E, out);
        a.jmp(top);
        a.bind(out);
        a.ret();
        assert_eq!(a.finish(), vec![0x74, 0x05, 0xe9, 0xf9, 0xff, 0xff, 0xff, 0xc3]);
    }
}
