//! Independent oracles for property tests: a concrete interpreter for the
//! IA-32 subset that `-O0` code uses, and a generator of random loop-free
//! functions to run it on.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::fixture::asm::{Alu, Asm, Label, Mem};
use crate::loader::RegionTable;
use crate::superset::x86::{Cond, Width};
use crate::superset::{decode_at, DecodedInstr, Mnemonic, Operand, Reg};
use crate::vsa::{function_cfg, func_wise_vsa, AbsBase, AbsLoc, AbsValue, VsaConfig, VsaError};

/// A concrete 32-bit value and, when known, its form `coeff·esp0 + c` in
/// terms of the initial stack pointer. Only coefficients 0 and 1 are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CVal {
    pub value: u32,
    pub form: Option<(u8, u32)>,
}

impl CVal {
    fn unknown(value: u32) -> CVal {
        CVal { value, form: None }
    }

    fn konst(value: u32) -> CVal {
        CVal { value, form: Some((0, value)) }
    }

    fn linear(value: u32, coeff: i64, c: u32) -> CVal {
        match coeff {
            0 | 1 => CVal { value, form: Some((coeff as u8, c)) },
            _ => CVal::unknown(value),
        }
    }

    fn add(self, o: CVal) -> CVal {
        let value = self.value.wrapping_add(o.value);
        match (self.form, o.form) {
            (Some((a, x)), Some((b, y))) => CVal::linear(value, a as i64 + b as i64, x.wrapping_add(y)),
            _ => CVal::unknown(value),
        }
    }

    fn sub(self, o: CVal) -> CVal {
        let value = self.value.wrapping_sub(o.value);
        match (self.form, o.form) {
            (Some((a, x)), Some((b, y))) => CVal::linear(value, a as i64 - b as i64, x.wrapping_sub(y)),
            _ => CVal::unknown(value),
        }
    }

    /// Any other operation: known only when both inputs are constants.
    fn map2(self, o: CVal, f: impl Fn(u32, u32) -> u32) -> CVal {
        let value = f(self.value, o.value);
        match (self.form, o.form) {
            (Some((0, _)), Some((0, _))) => CVal::konst(value),
            _ => CVal::unknown(value),
        }
    }

    /// The abstract location this value must be covered by, if any.
    pub fn expected(&self) -> Option<AbsLoc> {
        match self.form? {
            (0, c) => Some(AbsLoc { base: AbsBase::Const, offset: c as i32 as i64 }),
            (_, c) => Some(AbsLoc { base: AbsBase::StackInit, offset: c as i32 as i64 }),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Flags {
    cf: bool,
    zf: bool,
    sf: bool,
    of: bool,
    pf: bool,
}

impl Flags {
    fn sub(a: u32, b: u32) -> Flags {
        let r = a.wrapping_sub(b);
        Flags {
            cf: a < b,
            zf: r == 0,
            sf: (r as i32) < 0,
            of: (a as i32).checked_sub(b as i32).is_none(),
            pf: (r as u8).count_ones() % 2 == 0,
        }
    }

    fn logic(r: u32) -> Flags {
        Flags { cf: false, zf: r == 0, sf: (r as i32) < 0, of: false, pf: (r as u8).count_ones() % 2 == 0 }
    }

    fn holds(&self, c: Cond) -> bool {
        match c {
            Cond::O => self.of,
            Cond::No => !self.of,
            Cond::B => self.cf,
            Cond::Ae => !self.cf,
            Cond::E => self.zf,
            Cond::Ne => !self.zf,
            Cond::Be => self.cf || self.zf,
            Cond::A => !self.cf && !self.zf,
            Cond::S => self.sf,
            Cond::Ns => !self.sf,
            Cond::P => self.pf,
            Cond::Np => !self.pf,
            Cond::L => self.sf != self.of,
            Cond::Ge => self.sf == self.of,
            Cond::Le => self.zf || self.sf != self.of,
            Cond::G => !self.zf && self.sf == self.of,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InterpError {
    Unsupported { offset: usize, text: String },
    /// Control left the decoded instructions other than by `ret`.
    FellOff { offset: usize },
    StepLimit,
}

/// Register file before one executed instruction.
#[derive(Clone, Debug)]
pub struct TracePoint {
    pub offset: usize,
    pub regs: [CVal; 8],
}

/// Executes from the first instruction to `ret`. Registers other than `esp`
/// start as arbitrary (untracked) values; memory starts as arbitrary
/// (untracked) contents.
pub fn interpret(instrs: &[DecodedInstr], esp0: u32, init: [u32; 8]) -> Result<Vec<TracePoint>, InterpError> {
    let index: HashMap<usize, usize> = instrs.iter().enumerate().map(|(i, ins)| (ins.offset, i)).collect();
    let mut regs = init.map(CVal::unknown);
    regs[Reg::Esp as usize] = CVal { value: esp0, form: Some((1, 0)) };
    let mut mem: HashMap<u32, CVal> = HashMap::new();
    let mut flags: Option<Flags> = None;
    let mut trace = Vec::new();
    let mut pc = 0usize;
    for _ in 0..10_000 {
        let ins = instrs.get(pc).ok_or(InterpError::FellOff { offset: pc })?;
        trace.push(TracePoint { offset: ins.offset, regs });
        let unsupported = || InterpError::Unsupported { offset: ins.offset, text: format!("{ins}") };
        let ops = ins.operands.as_slice();

        let addr = |regs: &[CVal; 8], m: &crate::superset::MemOperand| -> Option<CVal> {
            if m.addr16 {
                return None;
            }
            let mut a = CVal::konst(m.disp as u32);
            if let Some(b) = m.base {
                a = a.add(regs[b as usize]);
            }
            if let Some(i) = m.index {
                let v = regs[i as usize];
                let mut scaled = CVal::konst(0);
                for _ in 0..m.scale {
                    scaled = scaled.add(v);
                }
                a = a.add(scaled);
            }
            Some(a)
        };
        let read = |regs: &[CVal; 8], mem: &HashMap<u32, CVal>, op: &Operand| -> Option<CVal> {
            match op {
                Operand::Reg(g) => g.as_dword().map(|r| regs[r as usize]),
                Operand::Imm { value } => Some(CVal::konst(*value as u32)),
                Operand::Mem { mem: m, width: Width::Dword } => {
                    let a = addr(regs, m)?.value;
                    // Unwritten memory holds some value the program cannot know.
                    Some(mem.get(&a).copied().unwrap_or(CVal::unknown(a.rotate_left(7) ^ 0x5a5a_5a5a)))
                }
                _ => None,
            }
        };
        let mut next = pc + 1;
        let mut result: Option<(Operand, CVal)> = None;
        match (ins.mnemonic, ops) {
            (Mnemonic::Nop, _) => {}
            (Mnemonic::Mov, [d, s]) => {
                let v = read(&regs, &mem, s).ok_or_else(unsupported)?;
                result = Some((*d, v));
            }
            (Mnemonic::Lea, [d, Operand::Mem { mem: m, .. }]) => {
                result = Some((*d, addr(&regs, m).ok_or_else(unsupported)?));
            }
            (Mnemonic::Push, [s]) => {
                let v = read(&regs, &mem, s).ok_or_else(unsupported)?;
                let esp = regs[Reg::Esp as usize].sub(CVal::konst(4));
                regs[Reg::Esp as usize] = esp;
                mem.insert(esp.value, v);
            }
            (Mnemonic::Pop, [d]) => {
                let esp = regs[Reg::Esp as usize];
                let v = read(&regs, &mem, &Operand::Mem {
                    mem: crate::superset::MemOperand { base: Some(Reg::Esp), index: None, scale: 1, disp: 0, addr16: false },
                    width: Width::Dword,
                })
                .ok_or_else(unsupported)?;
                regs[Reg::Esp as usize] = esp.add(CVal::konst(4));
                result = Some((*d, v));
            }
            (Mnemonic::Leave, []) => {
                let ebp = regs[Reg::Ebp as usize];
                let v = mem.get(&ebp.value).copied().unwrap_or(CVal::unknown(0));
                regs[Reg::Esp as usize] = ebp.add(CVal::konst(4));
                regs[Reg::Ebp as usize] = v;
            }
            (m @ (Mnemonic::Add | Mnemonic::Sub | Mnemonic::And | Mnemonic::Or | Mnemonic::Xor | Mnemonic::Cmp), [d, s]) => {
                let a = read(&regs, &mem, d).ok_or_else(unsupported)?;
                let b = read(&regs, &mem, s).ok_or_else(unsupported)?;
                let same_reg = matches!((d, s), (Operand::Reg(x), Operand::Reg(y)) if x == y);
                let v = match m {
                    Mnemonic::Add => a.add(b),
                    Mnemonic::Sub if same_reg => CVal::konst(0),
                    Mnemonic::Sub | Mnemonic::Cmp => a.sub(b),
                    Mnemonic::And => a.map2(b, |x, y| x & y),
                    Mnemonic::Or => a.map2(b, |x, y| x | y),
                    _ if same_reg => CVal::konst(0),
                    _ => a.map2(b, |x, y| x ^ y),
                };
                flags = match m {
                    Mnemonic::Cmp | Mnemonic::Sub => Some(Flags::sub(a.value, b.value)),
                    Mnemonic::And | Mnemonic::Or | Mnemonic::Xor => Some(Flags::logic(v.value)),
                    _ => None,
                };
                if m != Mnemonic::Cmp {
                    result = Some((*d, v));
                }
            }
            (Mnemonic::Test, [d, s]) => {
                let a = read(&regs, &mem, d).ok_or_else(unsupported)?;
                let b = read(&regs, &mem, s).ok_or_else(unsupported)?;
                flags = Some(Flags::logic(a.value & b.value));
            }
            (m @ (Mnemonic::Inc | Mnemonic::Dec), [d]) => {
                let a = read(&regs, &mem, d).ok_or_else(unsupported)?;
                let one = CVal::konst(1);
                result = Some((*d, if m == Mnemonic::Inc { a.add(one) } else { a.sub(one) }));
                flags = None;
            }
            (Mnemonic::Imul, [d, s, Operand::Imm { value }]) => {
                let a = read(&regs, &mem, s).ok_or_else(unsupported)?;
                let k = *value as u32;
                let v = match a.form {
                    Some((c, x)) => CVal::linear(a.value.wrapping_mul(k), c as i64 * k as i32 as i64, x.wrapping_mul(k)),
                    None => CVal::unknown(a.value.wrapping_mul(k)),
                };
                result = Some((*d, v));
                flags = None;
            }
            (Mnemonic::Shl, [d, Operand::Imm { value }]) => {
                let a = read(&regs, &mem, d).ok_or_else(unsupported)?;
                let n = (*value as u32) & 31;
                let k = 1u32 << n;
                let v = match a.form {
                    Some((c, x)) => CVal::linear(a.value.wrapping_shl(n), c as i64 * k as i64, x.wrapping_mul(k)),
                    None => CVal::unknown(a.value.wrapping_shl(n)),
                };
                result = Some((*d, v));
                flags = None;
            }
            (Mnemonic::Jcc(c), [Operand::Rel { target }]) => {
                let f = flags.ok_or_else(unsupported)?;
                if f.holds(c) {
                    next = *index.get(&(*target as usize)).ok_or(InterpError::FellOff { offset: *target as usize })?;
                }
            }
            (Mnemonic::Jmp, [Operand::Rel { target }]) => {
                next = *index.get(&(*target as usize)).ok_or(InterpError::FellOff { offset: *target as usize })?;
            }
            (Mnemonic::Ret, []) => return Ok(trace),
            _ => return Err(unsupported()),
        }
        if let Some((dst, v)) = result {
            match dst {
                Operand::Reg(g) => {
                    let r = g.as_dword().ok_or_else(unsupported)?;
                    regs[r as usize] = v;
                }
                Operand::Mem { mem: m, width: Width::Dword } => {
                    let a = addr(&regs, &m).ok_or_else(unsupported)?;
                    mem.insert(a.value, v);
                }
                _ => return Err(unsupported()),
            }
        }
        pc = next;
    }
    Err(InterpError::StepLimit)
}

const BODY_REGS: [Reg; 6] = [Reg::Eax, Reg::Ecx, Reg::Edx, Reg::Ebx, Reg::Esi, Reg::Edi];

/// A random `ebp`-framed function of at most `max_instrs` instructions,
/// touching memory only through `esp` and `ebp`. With `branches`, forward
/// conditional and unconditional jumps create joins; the code never loops.
pub fn generate_function(rng: &mut impl Rng, max_instrs: usize, branches: bool) -> Vec<u8> {
    let max_instrs = max_instrs.max(6);
    let frame = 4 * rng.gen_range(2..8);
    let mut a = Asm::new();
    a.push_r(Reg::Ebp);
    a.mov_rr(Reg::Ebp, Reg::Esp);
    a.alu_ri(Alu::Sub, Reg::Esp, frame);
    let mut count = 3;
    let mut pending: Vec<(Label, usize)> = Vec::new();
    let budget = max_instrs - 2;
    let r = |rng: &mut dyn rand::RngCore| *BODY_REGS.choose(rng).unwrap();
    let slot = |rng: &mut dyn rand::RngCore| Mem::base(Reg::Ebp, -4 * rng.gen_range(1..=frame / 4 + 1));
    while count < budget {
        // Bind labels whose jump has been passed.
        pending.retain(|&(l, at)| {
            if at <= count {
                a.bind(l);
                false
            } else {
                true
            }
        });
        let room = budget - count;
        match rng.gen_range(0..20) {
            0 => a.mov_ri(r(rng), rng.gen_range(-64..64)),
            1 => a.mov_ri(r(rng), rng.gen()),
            2 => a.mov_rr(r(rng), *[Reg::Esp, Reg::Ebp, r(rng)].choose(rng).unwrap()),
            3 => a.lea(r(rng), slot(rng)),
            4 => a.lea(r(rng), Mem::base(*[Reg::Esp, r(rng)].choose(rng).unwrap(), rng.gen_range(-32..32))),
            5 => a.alu_ri(*[Alu::Add, Alu::Sub].choose(rng).unwrap(), r(rng), rng.gen_range(-100..100)),
            6 => a.alu_rr(*[Alu::Add, Alu::Sub].choose(rng).unwrap(), r(rng), *[r(rng), Reg::Esp].choose(rng).unwrap()),
            7 => a.alu_ri(*[Alu::And, Alu::Or, Alu::Xor].choose(rng).unwrap(), r(rng), rng.gen_range(0..256)),
            8 => {
                let x = r(rng);
                a.alu_rr(Alu::Xor, x, x)
            }
            9 => {
                if rng.gen() {
                    a.inc_r(r(rng))
                } else {
                    a.dec_r(r(rng))
                }
            }
            10 => a.imul_rri(r(rng), r(rng), rng.gen_range(-4..5)),
            11 => a.shl_ri(r(rng), rng.gen_range(0..4)),
            12 => a.mov_mr(slot(rng), r(rng)),
            13 => a.mov_mi(slot(rng), rng.gen_range(-64..64)),
            14 => a.mov_rm(r(rng), slot(rng)),
            15 => a.mov_rm(r(rng), Mem::base(Reg::Esp, 4 * rng.gen_range(0..4))),
            16 => {
                if rng.gen() {
                    a.push_r(r(rng))
                } else {
                    a.push_imm(rng.gen_range(-8..8))
                }
            }
            17 => a.pop_r(r(rng)),
            18 => a.alu_mi(*[Alu::Add, Alu::Sub].choose(rng).unwrap(), slot(rng), rng.gen_range(-16..16)),
            _ if branches && room >= 3 => {
                let l = a.label();
                let skip = rng.gen_range(1..=(room - 2).min(5));
                if rng.gen_bool(0.8) {
                    let x = r(rng);
                    if rng.gen() {
                        a.alu_ri(Alu::Cmp, x, rng.gen_range(-8..8));
                    } else {
                        a.test_rr(x, x);
                    }
                    a.jcc(Cond::from_bits(rng.gen_range(0..16)), l);
                    count += 1;
                } else {
                    a.jmp(l);
                }
                pending.push((l, count + 1 + skip));
            }
            _ => a.nop(),
        }
        count += 1;
    }
    for (l, _) in pending {
        a.bind(l);
    }
    a.leave();
    a.ret();
    a.finish()
}

/// Linear decoding of a generated function.
pub fn decode_function(code: &[u8]) -> Vec<DecodedInstr> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < code.len() {
        let i = decode_at(code, at).expect("generated code decodes");
        at = i.end();
        out.push(i);
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct SoundnessStats {
    pub functions: usize,
    /// Register observations compared against a non-Top abstract value.
    pub checked: usize,
    pub violations: Vec<String>,
}

/// Runs the analysis on `code` and checks every register value of one
/// concrete execution against it. With `exact`, non-Top abstract values of
/// known concrete values must be the singleton of that value.
pub fn check_function(
    code: &[u8],
    esp0: u32,
    init: [u32; 8],
    exact: bool,
    stats: &mut SoundnessStats,
) -> Result<(), VsaError> {
    let instrs = decode_function(code);
    let f = function_cfg("gen".into(), 0, instrs.clone());
    let res = func_wise_vsa(&f, &RegionTable::default(), &Default::default(), &VsaConfig::default())?;
    let trace = match interpret(&instrs, esp0, init) {
        Ok(t) => t,
        Err(e) => {
            stats.violations.push(format!("interpreter: {e:?}"));
            return Ok(());
        }
    };
    stats.functions += 1;
    for point in trace {
        let Some(state) = res.states.get(&point.offset) else {
            stats.violations.push(format!("offset {} executed but not analyzed", point.offset));
            continue;
        };
        for r in Reg::ALL {
            let Some(loc) = point.regs[r as usize].expected() else { continue };
            let abs = state.reg(r);
            if abs.is_top() {
                if exact {
                    stats.violations.push(format!("{r:?} at {} is Top, expected {loc}", point.offset));
                }
                continue;
            }
            stats.checked += 1;
            let ok = if exact { *abs == AbsValue::Set([loc].into()) } else { abs.contains(&loc) };
            if !ok {
                stats.violations.push(format!("{r:?} at {}: {loc} not covered by {abs:?}", point.offset));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpreter_basics() {
        let mut a = Asm::new();
        a.push_r(Reg::Ebp);
        a.mov_rr(Reg::Ebp, Reg::Esp);
        a.mov_mi(Mem::base(Reg::Ebp, -8), 5);
        a.mov_rm(Reg::Eax, Mem::base(Reg::Ebp, -8));
        a.lea(Reg::Ecx, Mem::base(Reg::Ebp, -12));
        a.alu_ri(Alu::Cmp, Reg::Eax, 5);
        let l = a.label();
        a.jcc(Cond::E, l);
        a.mov_ri(Reg::Eax, 9);
        a.bind(l);
        a.leave();
        a.ret();
        let instrs = decode_function(&a.finish());
        let t = interpret(&instrs, 0x1000, [0; 8]).unwrap();
        let last = t.last().unwrap();
        assert_eq!(last.regs[Reg::Eax as usize], CVal::konst(5));
        assert_eq!(last.regs[Reg::Ecx as usize].expected(), Some(AbsLoc { base: AbsBase::StackInit, offset: -16 }));
        assert_eq!(last.regs[Reg::Esp as usize].expected(), Some(AbsLoc { base: AbsBase::StackInit, offset: 0 }));
        // The mov of 9 is skipped.
        assert_eq!(t.len(), instrs.len() - 1);
    }

    #[test]
    fn flags_follow_the_manual() {
        let f = Flags::sub(1, 2);
        assert!(f.holds(Cond::B) && f.holds(Cond::L) && f.holds(Cond::Ne) && !f.holds(Cond::G));
        let f = Flags::sub(0x8000_0000, 1);
        assert!(f.holds(Cond::O) && f.holds(Cond::A) && f.holds(Cond::L) && !f.holds(Cond::G));
    }

    #[test]
    fn small_sample_is_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stats = SoundnessStats::default();
        for i in 0..60 {
            let straight = i % 2 == 0;
            let code = generate_function(&mut rng, 20, !straight);
            let esp0 = 0x0bff_0000 + 16 * rng.gen_range(0..4096);
            let before = stats.violations.len();
            check_function(&code, esp0, rng.gen(), straight, &mut stats).unwrap();
            if stats.violations.len() > before && before == 0 {
                for ins in decode_function(&code) {
                    eprintln!("{:4} {ins}", ins.offset);
                }
            }
        }
        assert!(stats.violations.is_empty(), "{:#?}", &stats.violations[..stats.violations.len().min(10)]);
        assert_eq!(stats.functions, 60);
        assert!(stats.checked > 300);
    }
}
