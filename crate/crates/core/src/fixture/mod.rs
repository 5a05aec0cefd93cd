//! Deterministic test binaries: a hand-laid `discard_moves` program, a
//! prologue/PLT sample, and a generator for small compiler-like corpora.

pub mod asm;
pub mod corpus;
pub mod dwarf_writer;
pub mod elf_writer;

use asm::{Alu, Asm, Mem};
use dwarf_writer::{build_dwarf, DFrameBase, DFunc, DLoc, DType, DVar};
use elf_writer::{write_elf32, ElfImage, OutSection, OutSymbol, OutSymbolKind};

use crate::superset::x86::{Cond, Reg};

pub use corpus::{generate_corpus, CorpusConfig};

pub const TEXT_VADDR: u32 = 0x0804_9000;

fn func_symbol(name: &str, vaddr: u32, size: u32) -> OutSymbol {
    OutSymbol { name: name.into(), vaddr, size, kind: OutSymbolKind::Func, section: ".text".into() }
}

fn object_symbol(name: &str, vaddr: u32, size: u32, section: &str) -> OutSymbol {
    OutSymbol { name: name.into(), vaddr, size, kind: OutSymbolKind::Object, section: section.into() }
}

fn rule_type() -> DType {
    DType::Struct { name: "rule".into(), size: 8 }
}

/// The `discard_moves` program: `main` and `sum_board` followed by
/// `discard_moves` at code offset 313, with `.data` at
/// `[0x804a010, 0x804a02f]` holding `board_size`, `komi` and `rules[3]`.
pub fn discard_moves() -> Vec<u8> {
    discard_moves_with(true)
}

/// The same program without a symbol table.
pub fn discard_moves_stripped() -> Vec<u8> {
    discard_moves_with(false)
}

const BOARD_SIZE: u32 = 0x0804_a010;
const KOMI: u32 = 0x0804_a014;
const RULES: u32 = 0x0804_a018;
const RODATA: u32 = 0x0804_a000;
const BSS: u32 = 0x0804_a030;

fn discard_moves_with(symtab: bool) -> Vec<u8> {
    let mut a = Asm::new();
    let sum_board = a.label();
    let discard = a.label();

    // int main(void)
    a.push_r(Reg::Ebp);
    a.mov_rr(Reg::Ebp, Reg::Esp);
    a.alu_ri(Alu::Sub, Reg::Esp, 0x28);
    a.mov_mi(Mem::base(Reg::Ebp, -0x10), 5);
    for k in 0..4 {
        a.mov_mi(Mem::base(Reg::Ebp, -0x20 + 4 * k), k + 1);
    }
    a.lea(Reg::Eax, Mem::base(Reg::Ebp, -0x20));
    a.mov_mr(Mem::base(Reg::Esp, 0), Reg::Eax);
    a.mov_mi(Mem::base(Reg::Esp, 4), 4);
    a.call(sum_board);
    a.mov_mr(Mem::base(Reg::Ebp, -0xc), Reg::Eax);
    a.mov_rm(Reg::Eax, Mem::base(Reg::Ebp, -0x10));
    a.mov_mr(Mem::base(Reg::Esp, 0), Reg::Eax);
    a.call(discard);
    a.mov_rm(Reg::Eax, Mem::abs(BOARD_SIZE));
    a.alu_rm(Alu::Add, Reg::Eax, Mem::base(Reg::Ebp, -0xc));
    a.mov_rm(Reg::Edx, Mem::abs(RODATA));
    a.alu_rr(Alu::Add, Reg::Eax, Reg::Edx);
    a.leave();
    a.ret();
    let main_end = a.pos();
    a.align(16);

    // int sum_board(int *p, int n)
    let sum_start = a.pos();
    a.bind(sum_board);
    a.push_r(Reg::Ebp);
    a.mov_rr(Reg::Ebp, Reg::Esp);
    a.alu_ri(Alu::Sub, Reg::Esp, 0x10);
    a.mov_mi(Mem::base(Reg::Ebp, -4), 0);
    a.mov_mi(Mem::base(Reg::Ebp, -8), 0);
    let cond = a.label();
    a.jmp_short(cond);
    let body = a.here();
    a.mov_rm(Reg::Eax, Mem::base(Reg::Ebp, -8));
    a.mov_rm(Reg::Edx, Mem::base(Reg::Ebp, 8));
    a.mov_rm(Reg::Eax, Mem::based_indexed(Reg::Edx, Reg::Eax, 4, 0));
    a.alu_mr(Alu::Add, Mem::base(Reg::Ebp, -4), Reg::Eax);
    a.inc_m(Mem::base(Reg::Ebp, -8));
    a.bind(cond);
    a.mov_rm(Reg::Eax, Mem::base(Reg::Ebp, -8));
    a.alu_rm(Alu::Cmp, Reg::Eax, Mem::base(Reg::Ebp, 0xc));
    a.jcc_short(Cond::L, body);
    a.mov_rm(Reg::Eax, Mem::base(Reg::Ebp, -4));
    a.mov_mr(Mem::abs(KOMI), Reg::Eax);
    a.mov_mr(Mem::abs(BSS), Reg::Eax);
    a.leave();
    a.ret();
    let sum_end = a.pos();
    while a.pos() < 313 {
        a.nop();
    }
    assert_eq!(a.pos(), 313, "filler functions overran the discard_moves slot");

    // void discard_moves(void)
    a.bind(discard);
    a.push_r(Reg::Ebp); // 313
    a.mov_rr(Reg::Ebp, Reg::Esp); // 314
    a.alu_ri(Alu::Sub, Reg::Esp, 0x18); // 316
    a.mov_mi(Mem::base(Reg::Ebp, -0xc), 0); // 319
    let cond = a.label();
    a.jmp_short(cond); // 326
    let body = a.here(); // 328
    a.mov_rm(Reg::Eax, Mem::base(Reg::Ebp, -0xc));
    a.alu_mr(Alu::Cmp, Mem::indexed(Reg::Eax, 8, RULES as i32), Reg::Ecx); // 331
    let skip = a.label();
    a.jcc_short(Cond::E, skip); // 338
    a.mov_rm(Reg::Eax, Mem::base(Reg::Ebp, -0xc)); // 340
    a.mov_mr(Mem::indexed(Reg::Eax, 8, RULES as i32 + 4), Reg::Edx); // 343
    a.bind(skip);
    a.mov_rm(Reg::Edx, Mem::base(Reg::Ebp, -0x10)); // 350
    a.inc_m(Mem::base(Reg::Ebp, -0xc)); // 353
    a.bind(cond);
    a.alu_mi(Alu::Cmp, Mem::base(Reg::Ebp, -0xc), 2); // 356
    a.jcc_short(Cond::Le, body); // 360
    a.mov_rm(Reg::Eax, Mem::abs(RULES + 0x10)); // 362
    a.leave(); // 367
    a.ret(); // 368
    let discard_end = a.pos();
    a.align(16);
    let text = a.finish();

    let rodata: Vec<u8> = [7u32, 11, 13, 17].iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut data = Vec::new();
    for v in [19u32, 5, 1, 0, 2, 0, 3, 0] {
        data.extend_from_slice(&v.to_le_bytes());
    }

    let funcs = vec![
        DFunc {
            name: "main".into(),
            low_pc: TEXT_VADDR,
            len: main_end as u32,
            frame_base: DFrameBase::Ebp,
            vars: vec![
                DVar::new("moves", DType::Array(Box::new(DType::Int), 4), DLoc::Fbreg(-0x20)),
                DVar::new("color", DType::Int, DLoc::Fbreg(-0x10)),
                DVar::new("total", DType::Int, DLoc::Fbreg(-0xc)),
            ],
        },
        DFunc {
            name: "sum_board".into(),
            low_pc: TEXT_VADDR + sum_start as u32,
            len: (sum_end - sum_start) as u32,
            frame_base: DFrameBase::Ebp,
            vars: vec![
                DVar::new("s", DType::Int, DLoc::Breg(5, -4)),
                DVar::new("k", DType::Int, DLoc::Breg(5, -8)),
            ],
        },
        DFunc {
            name: "discard_moves".into(),
            low_pc: TEXT_VADDR + 313,
            len: (discard_end - 313) as u32,
            frame_base: DFrameBase::Cfa,
            vars: vec![
                DVar::new("i", DType::Int, DLoc::Fbreg(-20)),
                DVar::new("user_f", DType::Int, DLoc::Fbreg(-24)),
            ],
        },
    ];
    let globals = vec![
        DVar::new("board_size", DType::Int, DLoc::Addr(BOARD_SIZE)),
        DVar::new("komi", DType::Int, DLoc::Addr(KOMI)),
        DVar::new("rules", DType::Array(Box::new(rule_type()), 3), DLoc::Addr(RULES)),
        DVar::new("weights", DType::Array(Box::new(DType::Int), 4), DLoc::Addr(RODATA)),
        DVar::new("last_sum", DType::Int, DLoc::Addr(BSS)),
    ];

    let img = ElfImage {
        entry: TEXT_VADDR,
        sections: vec![
            OutSection::code(".text", TEXT_VADDR, text),
            OutSection::data(".rodata", RODATA, false, rodata),
            OutSection::data(".data", BOARD_SIZE, true, data),
            OutSection::bss(BSS, 4),
        ],
        symbols: vec![
            func_symbol("main", TEXT_VADDR, main_end as u32),
            func_symbol("sum_board", TEXT_VADDR + sum_start as u32, (sum_end - sum_start) as u32),
            func_symbol("discard_moves", TEXT_VADDR + 313, (discard_end - 313) as u32),
            object_symbol("weights", RODATA, 16, ".rodata"),
            object_symbol("board_size", BOARD_SIZE, 4, ".data"),
            object_symbol("komi", KOMI, 4, ".data"),
            object_symbol("rules", RULES, 24, ".data"),
            object_symbol("last_sum", BSS, 4, ".bss"),
        ],
        symtab,
        debug: build_dwarf("discard_moves.c", &funcs, &globals),
    };
    write_elf32(&img)
}

pub const PLT_VADDR: u32 = 0x0804_9000;
pub const PROLOGUE_FN: u32 = 0x0804_9310;
pub const LEAF_FN: u32 = 0x0804_9400;

/// A binary with a `.plt` stub, a function at 0x8049310 whose prologue pushes
/// twice before `mov ebp, esp` and keeps `array1` at `EBP-32`, and an
/// esp-frame leaf at 0x8049400. Its DWARF also carries variables whose
/// locations cannot be resolved statically.
pub fn prologue_sample() -> Vec<u8> {
    let mut plt = Asm::new();
    plt.jmp_m(Mem::abs(0x0804_a00c));
    plt.push_imm(0);
    plt.raw(&[0xe9, 0xf0, 0xff, 0xff, 0xff]);
    let plt = plt.finish();

    let text_vaddr = 0x0804_9300;
    let mut a = Asm::new();
    while (a.pos() as u32) < PROLOGUE_FN - text_vaddr {
        a.nop();
    }
    let f_start = a.pos();
    a.push_r(Reg::Ebp);
    a.push_r(Reg::Ebx);
    a.mov_rr(Reg::Ebp, Reg::Esp);
    a.alu_ri(Alu::Sub, Reg::Esp, 0x30);
    a.mov_mi(Mem::base(Reg::Ebp, -32), 1);
    a.mov_mi(Mem::base(Reg::Ebp, -28), 2);
    a.mov_rm(Reg::Eax, Mem::base(Reg::Ebp, 12));
    a.mov_mr(Mem::base(Reg::Ebp, -36), Reg::Eax);
    a.mov_rm(Reg::Ebx, Mem::base(Reg::Ebp, -36));
    a.mov_rm(Reg::Eax, Mem::base(Reg::Ebx, 0));
    a.mov_rr(Reg::Esp, Reg::Ebp);
    a.pop_r(Reg::Ebx);
    a.pop_r(Reg::Ebp);
    a.ret();
    let f_end = a.pos();
    while (a.pos() as u32) < LEAF_FN - text_vaddr {
        a.nop();
    }
    let g_start = a.pos();
    a.alu_ri(Alu::Sub, Reg::Esp, 0x10);
    a.mov_mi(Mem::base(Reg::Esp, 4), 3);
    a.mov_mi(Mem::base(Reg::Esp, 8), 4);
    a.mov_rm(Reg::Eax, Mem::base(Reg::Esp, 4));
    a.alu_rm(Alu::Add, Reg::Eax, Mem::base(Reg::Esp, 8));
    a.alu_ri(Alu::Add, Reg::Esp, 0x10);
    a.ret();
    let g_end = a.pos();
    let text = a.finish();

    let funcs = vec![
        DFunc {
            name: "fill_array".into(),
            low_pc: PROLOGUE_FN,
            len: (f_end - f_start) as u32,
            frame_base: DFrameBase::Ebp,
            vars: vec![
                DVar::new("array1", DType::Array(Box::new(DType::Int), 2), DLoc::Breg(5, -32)),
                DVar::new("cursor", DType::Pointer, DLoc::Breg(5, -36)),
                DVar::new("target", DType::Int, DLoc::Deref(5, -36)),
                DVar::new(
                    "ranged",
                    DType::Int,
                    DLoc::List { begin: PROLOGUE_FN, end: PROLOGUE_FN + 8, ebp_offset: -40 },
                ),
                DVar::new("optimized_out", DType::Int, DLoc::Missing),
            ],
        },
        DFunc {
            name: "leaf_sum".into(),
            low_pc: LEAF_FN,
            len: (g_end - g_start) as u32,
            frame_base: DFrameBase::Esp,
            vars: vec![
                DVar::new("a", DType::Int, DLoc::Breg(4, 4)),
                DVar::new("b", DType::Typedef("weight_t".into(), Box::new(DType::Int)), DLoc::Fbreg(8)),
            ],
        },
    ];
    let img = ElfImage {
        entry: PROLOGUE_FN,
        sections: vec![
            OutSection::code(".plt", PLT_VADDR, plt),
            OutSection::code(".text", text_vaddr, text),
            OutSection::data(".data", 0x0804_a000, true, vec![0; 16]),
        ],
        symbols: vec![
            OutSymbol {
                name: "puts@plt".into(),
                vaddr: PLT_VADDR,
                size: 16,
                kind: OutSymbolKind::Func,
                section: ".plt".into(),
            },
            func_symbol("fill_array", PROLOGUE_FN, (f_end - f_start) as u32),
            func_symbol("leaf_sum", LEAF_FN, (g_end - g_start) as u32),
        ],
        symtab: true,
        debug: build_dwarf("prologue.c", &funcs, &[]),
    };
    write_elf32(&img)
}

/// An executable whose `.text` section is empty.
pub fn empty_text() -> Vec<u8> {
    let img = ElfImage {
        entry: TEXT_VADDR,
        sections: vec![
            OutSection::code(".text", TEXT_VADDR, Vec::new()),
            OutSection::data(".data", 0x0804_a000, true, vec![0; 4]),
        ],
        symbols: Vec::new(),
        symtab: true,
        debug: Vec::new(),
    };
    write_elf32(&img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loader::load_elf_bytes;

    #[test]
    fn discard_moves_layout() {
        let img = load_elf_bytes("discard_moves.elf", &discard_moves()).unwrap();
        assert_eq!(img.code_vaddr, TEXT_VADDR);
        let at = |o: usize, bytes: &[u8]| assert_eq!(&img.code[o..o + bytes.len()], bytes, "offset {o}");
        at(313, &[0x55, 0x89, 0xe5, 0x83, 0xec, 0x18]);
        at(319, &[0xc7, 0x45, 0xf4, 0, 0, 0, 0]);
        at(326, &[0xeb, 0x1c]);
        at(331, &[0x39, 0x0c, 0xc5, 0x18, 0xa0, 0x04, 0x08]);
        at(338, &[0x74, 0x0a]);
        at(343, &[0x89, 0x14, 0xc5, 0x1c, 0xa0, 0x04, 0x08]);
        at(353, &[0xff, 0x45, 0xf4]);
        at(356, &[0x83, 0x7d, 0xf4, 0x02, 0x7e, 0xde]);
        at(362, &[0xa1, 0x28, 0xa0, 0x04, 0x08, 0xc9, 0xc3]);
    }
}
