//! Random `-O0`-style programs: ebp- and esp-framed functions over local
//! scalars, arrays and structs, global tables, counted loops, branches and
//! calls, with matching DWARF and NOP padding between functions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::asm::{Alu, Asm, Label, Mem};
use super::dwarf_writer::{build_dwarf, DFrameBase, DFunc, DLoc, DType, DVar};
use super::elf_writer::{write_elf32, ElfImage, OutSection, OutSymbol, OutSymbolKind};
use super::TEXT_VADDR;
use crate::superset::x86::{Cond, Reg};

const RODATA_VADDR: u32 = 0x0804_c000;
const DATA_VADDR: u32 = 0x0804_d000;
const BSS_VADDR: u32 = 0x0804_e000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub binaries: usize,
    pub functions: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { binaries: 2, functions: 6, seed: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusBinary {
    pub name: String,
    pub elf: Vec<u8>,
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Vec<CorpusBinary> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.binaries)
        .map(|b| {
            let name = format!("prog{b:02}");
            let elf = generate_binary(&mut rng, &name, cfg.functions.max(1));
            CorpusBinary { name, elf }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Scalar,
    IntArray(u32),
    CharArray(u32),
    StructArray(u32),
}

impl Shape {
    fn dtype(self) -> DType {
        match self {
            Shape::Scalar => DType::Int,
            Shape::IntArray(n) => DType::Array(Box::new(DType::Int), n),
            Shape::CharArray(n) => DType::Array(Box::new(DType::Char), n),
            Shape::StructArray(n) => {
                DType::Array(Box::new(DType::Struct { name: "pair".into(), size: 8 }), n)
            }
        }
    }

    fn size(self) -> u32 {
        self.dtype().size()
    }
}

#[derive(Clone, Debug)]
struct Global {
    name: String,
    addr: u32,
    shape: Shape,
    writable: bool,
}

#[derive(Clone, Debug)]
struct Local {
    name: String,
    /// ebp-relative for ebp frames, esp-relative (after the prologue) for esp frames.
    off: i32,
    shape: Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Frame {
    /// `push ebp; mov ebp, esp; push saved...; sub esp, n`.
    Ebp { saved: usize },
    /// `push ebp; push ebx; mov ebp, esp; sub esp, n`.
    PrePush,
    /// `sub esp, n` only.
    Esp,
}

struct FnCtx<'a> {
    frame: Frame,
    frame_size: i32,
    locals: Vec<Local>,
    globals: &'a [Global],
    labels: &'a [Label],
}

impl FnCtx<'_> {
    fn base(&self) -> Reg {
        match self.frame {
            Frame::Esp => Reg::Esp,
            _ => Reg::Ebp,
        }
    }

    fn slot(&self, v: &Local, extra: i32) -> Mem {
        Mem::base(self.base(), v.off + extra)
    }

    fn element(&self, v: &Local, index: Reg, scale: u8) -> Mem {
        Mem::based_indexed(self.base(), index, scale, v.off)
    }

    fn pick<'b>(&'b self, rng: &mut ChaCha8Rng, f: impl Fn(Shape) -> bool) -> Option<&'b Local> {
        let c: Vec<&Local> = self.locals.iter().filter(|l| f(l.shape)).collect();
        c.choose(rng).copied()
    }

    fn pick_global<'b>(&'b self, rng: &mut ChaCha8Rng, f: impl Fn(&Global) -> bool) -> Option<&'b Global> {
        let c: Vec<&Global> = self.globals.iter().filter(|g| f(g)).collect();
        c.choose(rng).copied()
    }
}

const VERBS: [&str; 10] = ["init", "update", "scan", "merge", "count", "reset", "check", "load", "store", "apply"];
const NOUNS: [&str; 10] = ["board", "table", "moves", "score", "cache", "queue", "state", "rules", "stats", "grid"];

fn make_globals(rng: &mut ChaCha8Rng) -> (Vec<Global>, Vec<u8>, Vec<u8>, u32) {
    let mut globals = Vec::new();
    let mut rodata = Vec::new();
    let mut data = Vec::new();
    let mut bss = 0u32;
    let n = rng.gen_range(3..=6);
    for k in 0..n {
        let shape = match rng.gen_range(0..4) {
            0 => Shape::Scalar,
            1 => Shape::IntArray(rng.gen_range(2..=6)),
            2 => Shape::StructArray(rng.gen_range(2..=4)),
            _ => Shape::CharArray(rng.gen_range(4..=12)),
        };
        let size = shape.size().next_multiple_of(4);
        let (addr, writable) = match rng.gen_range(0..5) {
            0 => {
                let a = RODATA_VADDR + rodata.len() as u32;
                rodata.extend((0..size).map(|_| rng.gen::<u8>()));
                (a, false)
            }
            1 | 2 => {
                let a = DATA_VADDR + data.len() as u32;
                data.extend((0..size).map(|_| rng.gen::<u8>()));
                (a, true)
            }
            _ => {
                let a = BSS_VADDR + bss;
                bss += size;
                (a, true)
            }
        };
        globals.push(Global { name: format!("g_{}{k}", NOUNS[rng.gen_range(0..NOUNS.len())]), addr, shape, writable });
    }
    (globals, rodata, data, bss)
}

fn pad(a: &mut Asm, rng: &mut ChaCha8Rng) {
    let multi = rng.gen_bool(0.5);
    while a.pos() % 16 != 0 {
        let r = 16 - a.pos() % 16;
        if !multi || r == 1 {
            a.nop();
        } else if r >= 5 {
            a.raw(&[0x0f, 0x1f, 0x44, 0x00, 0x00]);
        } else if r == 4 {
            a.raw(&[0x0f, 0x1f, 0x40, 0x00]);
        } else if r == 3 {
            a.raw(&[0x0f, 0x1f, 0x00]);
        } else {
            a.raw(&[0x66, 0x90]);
        }
    }
}

fn generate_binary(rng: &mut ChaCha8Rng, name: &str, n_funcs: usize) -> Vec<u8> {
    let (globals, rodata, data, bss) = make_globals(rng);
    let mut a = Asm::new();
    let labels: Vec<Label> = (0..n_funcs).map(|_| a.label()).collect();
    let mut names = Vec::new();
    let mut dfuncs = Vec::new();
    let mut symbols = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let fname = if i == 0 {
            "main".to_string()
        } else {
            format!("{}_{}{i}", VERBS[rng.gen_range(0..VERBS.len())], NOUNS[rng.gen_range(0..NOUNS.len())])
        };
        names.push(fname.clone());
        let start = a.pos();
        a.bind(label);
        let (frame_base, vars) = gen_function(&mut a, rng, &globals, &labels);
        let len = (a.pos() - start) as u32;
        let low_pc = TEXT_VADDR + start as u32;
        dfuncs.push(DFunc { name: fname.clone(), low_pc, len, frame_base, vars });
        symbols.push(OutSymbol { name: fname, vaddr: low_pc, size: len, kind: OutSymbolKind::Func, section: ".text".into() });
        pad(&mut a, rng);
    }
    let text = a.finish();

    let mut sections = vec![OutSection::code(".text", TEXT_VADDR, text)];
    if !rodata.is_empty() {
        sections.push(OutSection::data(".rodata", RODATA_VADDR, false, rodata));
    }
    if !data.is_empty() {
        sections.push(OutSection::data(".data", DATA_VADDR, true, data));
    }
    if bss > 0 {
        sections.push(OutSection::bss(BSS_VADDR, bss));
    }
    for g in &globals {
        let section = match g.addr {
            a if a >= BSS_VADDR => ".bss",
            a if a >= DATA_VADDR => ".data",
            _ => ".rodata",
        };
        symbols.push(OutSymbol {
            name: g.name.clone(),
            vaddr: g.addr,
            size: g.shape.size(),
            kind: OutSymbolKind::Object,
            section: section.into(),
        });
    }
    let gvars: Vec<DVar> = globals.iter().map(|g| DVar::new(&g.name, g.shape.dtype(), DLoc::Addr(g.addr))).collect();
    let img = ElfImage {
        entry: TEXT_VADDR,
        sections,
        symbols,
        symtab: true,
        debug: build_dwarf(&format!("{name}.c"), &dfuncs, &gvars),
    };
    write_elf32(&img)
}

fn gen_locals(rng: &mut ChaCha8Rng, frame: Frame) -> (Vec<Local>, i32) {
    let mut shapes = vec![Shape::Scalar];
    for _ in 0..rng.gen_range(1..=4) {
        shapes.push(match rng.gen_range(0..5) {
            0 | 1 => Shape::Scalar,
            2 => Shape::IntArray(rng.gen_range(2..=6)),
            3 => Shape::CharArray(rng.gen_range(4..=16)),
            _ => Shape::StructArray(rng.gen_range(2..=3)),
        });
    }
    let names = ["i", "j", "n", "sum", "buf", "vals", "tmp", "acc", "flags", "cur"];
    let mut locals = Vec::new();
    match frame {
        Frame::Esp => {
            // Outgoing argument area at [esp, esp+8).
            let mut cursor = 8i32;
            for (k, s) in shapes.into_iter().enumerate() {
                locals.push(Local { name: names[k].into(), off: cursor, shape: s });
                cursor += s.size().next_multiple_of(4) as i32;
            }
            let size = (cursor as u32).next_multiple_of(16) as i32 + 12;
            (locals, size)
        }
        _ => {
            let saved = match frame {
                Frame::Ebp { saved } => saved as i32,
                _ => 0,
            };
            let mut cursor = -4 * saved;
            for (k, s) in shapes.into_iter().enumerate() {
                cursor -= s.size().next_multiple_of(4) as i32;
                locals.push(Local { name: names[k].into(), off: cursor, shape: s });
            }
            let size = ((-cursor + 8) as u32).next_multiple_of(16) as i32;
            (locals, size)
        }
    }
}

/// Emits one function; returns its DWARF frame base and variables.
fn gen_function(a: &mut Asm, rng: &mut ChaCha8Rng, globals: &[Global], labels: &[Label]) -> (DFrameBase, Vec<DVar>) {
    let frame = match rng.gen_range(0..10) {
        0..=5 => Frame::Ebp { saved: 0 },
        6 => Frame::Ebp { saved: 1 },
        7 => Frame::PrePush,
        _ => Frame::Esp,
    };
    let (locals, frame_size) = gen_locals(rng, frame);
    let saved_regs = [Reg::Ebx, Reg::Esi];
    match frame {
        Frame::Ebp { saved } => {
            a.push_r(Reg::Ebp);
            a.mov_rr(Reg::Ebp, Reg::Esp);
            for &r in &saved_regs[..saved] {
                a.push_r(r);
            }
        }
        Frame::PrePush => {
            a.push_r(Reg::Ebp);
            a.push_r(Reg::Ebx);
            a.mov_rr(Reg::Ebp, Reg::Esp);
        }
        Frame::Esp => {}
    }
    a.alu_ri(Alu::Sub, Reg::Esp, frame_size);

    let ctx = FnCtx { frame, frame_size, locals, globals, labels };
    for _ in 0..rng.gen_range(3..=8) {
        gen_statement(a, rng, &ctx);
    }
    let ret_var = ctx.pick(rng, |s| s == Shape::Scalar).expect("every function has a scalar");
    a.mov_rm(Reg::Eax, ctx.slot(ret_var, 0));

    match frame {
        Frame::Ebp { saved: 0 } => a.leave(),
        Frame::Ebp { saved } => {
            a.alu_ri(Alu::Add, Reg::Esp, frame_size);
            for &r in saved_regs[..saved].iter().rev() {
                a.pop_r(r);
            }
            a.pop_r(Reg::Ebp);
        }
        Frame::PrePush => {
            a.mov_rr(Reg::Esp, Reg::Ebp);
            a.pop_r(Reg::Ebx);
            a.pop_r(Reg::Ebp);
        }
        Frame::Esp => a.alu_ri(Alu::Add, Reg::Esp, frame_size),
    }
    a.ret();

    // Initial-esp distance of the frame register after the prologue.
    let delta = match frame {
        Frame::Ebp { .. } => -4,
        Frame::PrePush => -8,
        Frame::Esp => -ctx.frame_size,
    };
    let frame_reg = if frame == Frame::Esp { 4 } else { 5 };
    let style = rng.gen_range(0..3);
    let frame_base = match (style, frame) {
        (1, _) => DFrameBase::Cfa,
        (_, Frame::Esp) => DFrameBase::Esp,
        _ => DFrameBase::Ebp,
    };
    let vars = ctx
        .locals
        .iter()
        .map(|l| {
            let loc = match style {
                0 => DLoc::Fbreg(l.off as i64),
                1 => DLoc::Fbreg((delta + l.off - 4) as i64),
                _ => DLoc::Breg(frame_reg, l.off as i64),
            };
            DVar::new(&l.name, l.shape.dtype(), loc)
        })
        .collect();
    (frame_base, vars)
}

fn branch(a: &mut Asm, rng: &mut ChaCha8Rng, c: Cond, l: Label) {
    if rng.gen_bool(0.7) {
        a.jcc_short(c, l);
    } else {
        a.jcc(c, l);
    }
}

fn gen_statement(a: &mut Asm, rng: &mut ChaCha8Rng, ctx: &FnCtx<'_>) {
    let scalar = |s: Shape| s == Shape::Scalar;
    let int_array = |s: Shape| matches!(s, Shape::IntArray(_));
    match rng.gen_range(0..12) {
        0 => {
            let v = ctx.pick(rng, scalar).unwrap();
            a.mov_mi(ctx.slot(v, 0), rng.gen_range(-50..200));
        }
        1 => {
            let x = ctx.pick(rng, scalar).unwrap();
            let y = ctx.pick(rng, scalar).unwrap();
            a.mov_rm(Reg::Eax, ctx.slot(x, 0));
            a.alu_ri(Alu::Add, Reg::Eax, rng.gen_range(1..9));
            a.mov_mr(ctx.slot(y, 0), Reg::Eax);
        }
        2 => match ctx.pick(rng, |s| !scalar(s)) {
            Some(v) => {
                let (n, stride) = match v.shape {
                    Shape::IntArray(n) => (n, 4),
                    Shape::StructArray(n) => (n * 2, 4),
                    Shape::CharArray(n) => (n, 1),
                    Shape::Scalar => unreachable!(),
                };
                let k = rng.gen_range(0..n) as i32;
                if stride == 1 {
                    a.movb_mi(ctx.slot(v, k), rng.gen());
                } else {
                    a.mov_mi(ctx.slot(v, k * stride), rng.gen_range(0..100));
                }
            }
            None => a.mov_mi(ctx.slot(ctx.pick(rng, scalar).unwrap(), 0), 1),
        },
        3 | 4 => {
            // for (c = 0; c < n; c++) arr[c] = x;
            let c = ctx.pick(rng, scalar).unwrap();
            let (arr, n) = match ctx.pick(rng, int_array) {
                Some(v) => match v.shape {
                    Shape::IntArray(n) => (Some(v), n),
                    _ => unreachable!(),
                },
                None => (None, rng.gen_range(2..=5)),
            };
            let src = ctx.pick(rng, scalar).unwrap();
            a.mov_mi(ctx.slot(c, 0), 0);
            let cond = a.label();
            if rng.gen_bool(0.7) {
                a.jmp_short(cond);
            } else {
                a.jmp(cond);
            }
            let body = a.here();
            a.mov_rm(Reg::Eax, ctx.slot(c, 0));
            match arr {
                Some(arr) => {
                    a.mov_rm(Reg::Edx, ctx.slot(src, 0));
                    a.mov_mr(ctx.element(arr, Reg::Eax, 4), Reg::Edx);
                }
                None => match ctx.pick(rng, |s| scalar(s)).filter(|d| !std::ptr::eq(*d, c)) {
                    Some(d) => a.alu_mr(Alu::Add, ctx.slot(d, 0), Reg::Eax),
                    None => a.mov_rr(Reg::Edx, Reg::Eax),
                },
            }
            if rng.gen_bool(0.5) {
                a.inc_m(ctx.slot(c, 0));
            } else {
                a.mov_rm(Reg::Eax, ctx.slot(c, 0));
                a.alu_ri(Alu::Add, Reg::Eax, 1);
                a.mov_mr(ctx.slot(c, 0), Reg::Eax);
            }
            a.bind(cond);
            a.alu_mi(Alu::Cmp, ctx.slot(c, 0), n as i32 - 1);
            branch(a, rng, Cond::Le, body);
        }
        5 => match ctx.pick_global(rng, |g| g.writable && g.shape == Shape::Scalar) {
            Some(g) => {
                a.mov_rm(Reg::Eax, Mem::abs(g.addr));
                a.alu_ri(Alu::Add, Reg::Eax, rng.gen_range(1..5));
                a.mov_mr(Mem::abs(g.addr), Reg::Eax);
            }
            None => {
                let g = ctx.globals.choose(rng).unwrap();
                a.mov_rm(Reg::Ecx, Mem::abs(g.addr));
                let v = ctx.pick(rng, scalar).unwrap();
                a.mov_mr(ctx.slot(v, 0), Reg::Ecx);
            }
        },
        6 => {
            // Walk a global table with a counter.
            let Some(g) = ctx.pick_global(rng, |g| matches!(g.shape, Shape::IntArray(_) | Shape::StructArray(_)))
            else {
                return gen_statement(a, rng, ctx);
            };
            let (n, scale) = match g.shape {
                Shape::IntArray(n) => (n, 4u8),
                Shape::StructArray(n) => (n, 8u8),
                _ => unreachable!(),
            };
            let c = ctx.pick(rng, scalar).unwrap();
            let acc = ctx.pick(rng, scalar).unwrap();
            a.mov_mi(ctx.slot(c, 0), 0);
            let cond = a.label();
            a.jmp_short(cond);
            let body = a.here();
            a.mov_rm(Reg::Eax, ctx.slot(c, 0));
            if g.writable && rng.gen_bool(0.5) {
                a.mov_rm(Reg::Edx, ctx.slot(acc, 0));
                a.mov_mr(Mem::indexed(Reg::Eax, scale, g.addr as i32), Reg::Edx);
            } else {
                a.mov_rm(Reg::Edx, Mem::indexed(Reg::Eax, scale, g.addr as i32));
                a.alu_mr(Alu::Add, ctx.slot(acc, 0), Reg::Edx);
            }
            a.inc_m(ctx.slot(c, 0));
            a.bind(cond);
            a.alu_mi(Alu::Cmp, ctx.slot(c, 0), n as i32 - 1);
            branch(a, rng, Cond::Le, body);
        }
        7 => {
            // Element or field of a global aggregate at a constant index.
            let Some(g) = ctx.pick_global(rng, |g| g.shape != Shape::Scalar) else {
                return gen_statement(a, rng, ctx);
            };
            let (n, stride) = match g.shape {
                Shape::IntArray(n) => (n, 4),
                Shape::StructArray(n) => (n * 2, 4),
                Shape::CharArray(n) => (n, 1),
                Shape::Scalar => unreachable!(),
            };
            let k = rng.gen_range(0..n) * stride;
            if stride == 1 {
                a.movzx_rm8(Reg::Eax, Mem::abs(g.addr + k));
            } else if g.writable && rng.gen_bool(0.5) {
                a.mov_mi(Mem::abs(g.addr + k), rng.gen_range(0..9));
                return;
            } else {
                a.mov_rm(Reg::Eax, Mem::abs(g.addr + k));
            }
            let v = ctx.pick(rng, scalar).unwrap();
            a.mov_mr(ctx.slot(v, 0), Reg::Eax);
        }
        8 => {
            // callee(&local or scalar)
            let target = *ctx.labels.choose(rng).unwrap();
            if let Some(v) = ctx.pick(rng, |s| !scalar(s)) {
                a.lea(Reg::Eax, ctx.slot(v, 0));
            } else {
                a.mov_rm(Reg::Eax, ctx.slot(ctx.pick(rng, scalar).unwrap(), 0));
            }
            a.mov_mr(Mem::base(Reg::Esp, 0), Reg::Eax);
            a.call(target);
            let v = ctx.pick(rng, scalar).unwrap();
            a.mov_mr(ctx.slot(v, 0), Reg::Eax);
        }
        9 => {
            let x = ctx.pick(rng, scalar).unwrap();
            let y = ctx.pick(rng, scalar).unwrap();
            let skip = a.label();
            a.alu_mi(Alu::Cmp, ctx.slot(x, 0), rng.gen_range(0..20));
            let c = *[Cond::Ne, Cond::Le, Cond::G, Cond::E].choose(rng).unwrap();
            branch(a, rng, c, skip);
            a.mov_mi(ctx.slot(y, 0), rng.gen_range(0..10));
            a.bind(skip);
        }
        10 => match ctx.pick(rng, |s| matches!(s, Shape::CharArray(_))) {
            Some(v) => {
                let Shape::CharArray(n) = v.shape else { unreachable!() };
                let k = rng.gen_range(0..n) as i32;
                a.movsx_rm8(Reg::Ecx, ctx.slot(v, k));
                let y = ctx.pick(rng, scalar).unwrap();
                a.alu_mr(Alu::Add, ctx.slot(y, 0), Reg::Ecx);
            }
            None => {
                let x = ctx.pick(rng, scalar).unwrap();
                a.mov_rm(Reg::Eax, ctx.slot(x, 0));
                a.imul_rri(Reg::Eax, Reg::Eax, rng.gen_range(2..7));
                a.mov_mr(ctx.slot(x, 0), Reg::Eax);
            }
        },
        _ => {
            let x = ctx.pick(rng, scalar).unwrap();
            let y = ctx.pick(rng, scalar).unwrap();
            a.mov_rm(Reg::Eax, ctx.slot(x, 0));
            a.cdq();
            a.idiv_m(ctx.slot(y, 0));
            a.mov_mr(ctx.slot(x, 0), Reg::Edx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loader::{function_entry_ground_truth, load_elf_bytes};

    #[test]
    fn corpus_is_deterministic_and_loadable() {
        let cfg = CorpusConfig { binaries: 2, functions: 5, seed: 9 };
        let a = generate_corpus(&cfg);
        let b = generate_corpus(&cfg);
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.elf, y.elf);
            let img = load_elf_bytes(&x.name, &x.elf).unwrap();
            assert_eq!(function_entry_ground_truth(&img).unwrap().len(), 5);
            assert!(!img.dwarf_vars.is_empty());
        }
    }
}
