//! Transfer functions and the per-function worklist fixpoint.

use std::collections::{BTreeMap, BTreeSet};

use super::cfg::{EdgeKind, FunctionCfg};
use super::domain::{wrap32, AbsBase, AbsLoc, AbsState, AbsValue, Domain};
use super::VsaError;
use crate::loader::RegionTable;
use crate::superset::x86::{Cond, Width};
use crate::superset::{DecodedInstr, Flow, MemOperand, Mnemonic, Operand, Reg};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VsaConfig {
    /// Largest value set kept before collapsing to Top.
    pub k: usize,
    /// A block's entry state may change this many times before widening.
    pub widen_after: usize,
    pub max_slots: usize,
    /// Block visits allowed per function before giving up.
    pub max_visits: usize,
}

impl Default for VsaConfig {
    fn default() -> Self {
        VsaConfig { k: 16, widen_after: 3, max_slots: 256, max_visits: 200_000 }
    }
}

/// Abstract state before each reachable instruction of one function.
#[derive(Clone, Debug)]
pub struct VsaResult {
    pub function: String,
    pub entry: usize,
    pub states: BTreeMap<usize, AbsState>,
}

pub struct Transfer<'a> {
    pub d: Domain<'a>,
    pub max_slots: usize,
    /// Bytes popped by callees that return with `ret imm`, keyed by entry offset.
    pub callee_pops: &'a BTreeMap<usize, u16>,
}

impl Transfer<'_> {
    pub fn address(&self, s: &AbsState, m: &MemOperand) -> AbsValue {
        if m.addr16 {
            return AbsValue::Top;
        }
        let mut v = self.d.konst(m.disp);
        if let Some(b) = m.base {
            v = self.d.add(s.reg(b), &v);
        }
        if let Some(i) = m.index {
            v = self.d.add(&v, &self.d.scale(s.reg(i), m.scale));
        }
        v
    }

    fn load(&self, s: &AbsState, addr: &AbsValue, width: Width) -> AbsValue {
        if width != Width::Dword {
            return AbsValue::Top;
        }
        let Some(offs) = addr.stack_offsets() else {
            return AbsValue::Top;
        };
        let mut v: Option<AbsValue> = None;
        for o in offs {
            let x = s.slot(o);
            v = Some(match v {
                None => x,
                Some(acc) => self.d.join(&acc, &x),
            });
        }
        v.unwrap_or(AbsValue::Top)
    }

    fn clear_overlaps(s: &mut AbsState, start: i64, len: i64, keep: Option<i64>) {
        let doomed: Vec<i64> = s
            .slots
            .range(start - 3..start + len)
            .map(|(k, _)| *k)
            .filter(|k| Some(*k) != keep)
            .collect();
        for k in doomed {
            s.slots.remove(&k);
        }
    }

    fn store(&self, s: &mut AbsState, addr: &AbsValue, width: Width, v: AbsValue) {
        let Some(locs) = addr.locs() else {
            return;
        };
        let stack: Vec<i64> = locs.iter().filter(|l| l.base == AbsBase::StackInit).map(|l| l.offset).collect();
        let strong = stack.len() == 1 && locs.len() == 1;
        let len = width.bytes().map_or(10, i64::from);
        for o in stack {
            if width != Width::Dword {
                Self::clear_overlaps(s, o, len, None);
                continue;
            }
            Self::clear_overlaps(s, o, 4, Some(o));
            let nv = if strong { v.clone() } else { self.d.join(&s.slot(o), &v) };
            if nv.is_top() {
                s.slots.remove(&o);
            } else if s.slots.contains_key(&o) || s.slots.len() < self.max_slots {
                s.slots.insert(o, nv);
            }
        }
    }

    fn read(&self, s: &AbsState, op: &Operand) -> AbsValue {
        match op {
            Operand::Reg(g) => match g.as_dword() {
                Some(r) => s.reg(r).clone(),
                None => AbsValue::Top,
            },
            Operand::Imm { value } => self.d.konst(*value),
            Operand::Mem { mem, width } => self.load(s, &self.address(s, mem), *width),
            _ => AbsValue::Top,
        }
    }

    fn write(&self, s: &mut AbsState, op: &Operand, v: AbsValue) {
        match op {
            Operand::Reg(g) => match g.as_dword() {
                Some(r) => s.set_reg(r, v),
                None => s.set_reg(g.container(), AbsValue::Top),
            },
            Operand::Mem { mem, width } => {
                let a = self.address(s, mem);
                self.store(s, &a, *width, v);
            }
            _ => {}
        }
    }

    fn push(&self, s: &mut AbsState, v: AbsValue, bytes: i64) {
        let esp = self.d.add_const(s.reg(Reg::Esp), -bytes);
        let w = if bytes == 4 { Width::Dword } else { Width::Word };
        self.store(s, &esp, w, v);
        s.set_reg(Reg::Esp, esp);
    }

    fn pop(&self, s: &mut AbsState, bytes: i64) -> AbsValue {
        let esp = s.reg(Reg::Esp).clone();
        let w = if bytes == 4 { Width::Dword } else { Width::Word };
        let v = self.load(s, &esp, w);
        s.set_reg(Reg::Esp, self.d.add_const(&esp, bytes));
        v
    }

    fn clobber(s: &mut AbsState, regs: &[Reg]) {
        for &r in regs {
            s.set_reg(r, AbsValue::Top);
        }
    }

    /// Forgets every slot reachable through a stack pointer in `r`.
    fn clobber_through(s: &mut AbsState, r: Reg) {
        let touches_stack = match s.reg(r).locs() {
            None => false,
            Some(l) => l.iter().any(|x| x.base == AbsBase::StackInit),
        };
        if touches_stack {
            s.slots.clear();
        }
    }

    pub fn step(&self, s: &mut AbsState, ins: &DecodedInstr) {
        use Mnemonic as M;
        let ops = &ins.operands;
        let d = &self.d;
        let op_width = |op: &Operand| match op {
            Operand::Reg(g) => g.width,
            Operand::Mem { width, .. } => *width,
            _ => Width::Dword,
        };
        match ins.mnemonic {
            M::Mov => {
                let v = self.read(s, &ops[1]);
                self.write(s, &ops[0], v);
            }
            M::Movzx | M::Movsx => {
                let src = match &ops[1] {
                    Operand::Reg(g) => match g.width {
                        Width::Byte if g.index >= 4 => AbsValue::Top,
                        _ => s.reg(g.container()).clone(),
                    },
                    _ => AbsValue::Top,
                };
                let byte = op_width(&ops[1]) == Width::Byte;
                let v = match (ins.mnemonic, byte) {
                    (M::Movzx, true) => d.const_map(&src, |c| c & 0xff),
                    (M::Movzx, false) => d.const_map(&src, |c| c & 0xffff),
                    (_, true) => d.const_map(&src, |c| c as i8 as i32),
                    _ => d.const_map(&src, |c| c as i16 as i32),
                };
                self.write(s, &ops[0], v);
            }
            M::Lea => {
                let v = match &ops[1] {
                    Operand::Mem { mem, .. } => self.address(s, mem),
                    _ => AbsValue::Top,
                };
                self.write(s, &ops[0], v);
            }
            M::Push => {
                let bytes = if op_width(&ops[0]) == Width::Word { 2 } else { 4 };
                let v = match &ops[0] {
                    Operand::Seg { .. } => AbsValue::Top,
                    op => self.read(s, op),
                };
                self.push(s, v, bytes);
            }
            M::Pop => {
                let bytes = if op_width(&ops[0]) == Width::Word { 2 } else { 4 };
                let v = self.pop(s, bytes);
                self.write(s, &ops[0], v);
            }
            M::Add | M::Sub | M::And | M::Or | M::Xor | M::Adc | M::Sbb => {
                let same_reg = ops[0] == ops[1] && matches!(ops[0], Operand::Reg(_));
                let v = if same_reg && matches!(ins.mnemonic, M::Xor | M::Sub) {
                    if op_width(&ops[0]) == Width::Dword {
                        d.konst(0)
                    } else {
                        AbsValue::Top
                    }
                } else if op_width(&ops[0]) != Width::Dword {
                    AbsValue::Top
                } else {
                    let a = self.read(s, &ops[0]);
                    let b = self.read(s, &ops[1]);
                    match ins.mnemonic {
                        M::Add => d.add(&a, &b),
                        M::Sub => d.sub(&a, &b),
                        M::And => d.const_op(&a, &b, |x, y| x & y),
                        M::Or => d.const_op(&a, &b, |x, y| x | y),
                        M::Xor => d.const_op(&a, &b, |x, y| x ^ y),
                        _ => AbsValue::Top,
                    }
                };
                self.write(s, &ops[0], v);
            }
            M::Inc | M::Dec => {
                let v = if op_width(&ops[0]) == Width::Dword {
                    let a = self.read(s, &ops[0]);
                    d.add_const(&a, if ins.mnemonic == M::Inc { 1 } else { -1 })
                } else {
                    AbsValue::Top
                };
                self.write(s, &ops[0], v);
            }
            M::Neg | M::Not => {
                let v = if op_width(&ops[0]) == Width::Dword {
                    let a = self.read(s, &ops[0]);
                    if ins.mnemonic == M::Neg {
                        d.const_map(&a, |c| c.wrapping_neg())
                    } else {
                        d.const_map(&a, |c| !c)
                    }
                } else {
                    AbsValue::Top
                };
                self.write(s, &ops[0], v);
            }
            M::Imul if ops.len() >= 2 => {
                let (a, b) = if ops.len() == 3 {
                    (self.read(s, &ops[1]), self.read(s, &ops[2]))
                } else {
                    (self.read(s, &ops[0]), self.read(s, &ops[1]))
                };
                let v = d.mul(&a, &b);
                self.write(s, &ops[0], v);
            }
            M::Imul | M::Mul | M::Div | M::Idiv => Self::clobber(s, &[Reg::Eax, Reg::Edx]),
            M::Shl | M::Shr | M::Sar | M::Rol | M::Ror | M::Rcl | M::Rcr => {
                let v = if op_width(&ops[0]) == Width::Dword {
                    let a = self.read(s, &ops[0]);
                    let n = self.read(s, &ops[1]);
                    match ins.mnemonic {
                        _ if n.consts().is_some_and(|c| c.iter().all(|&c| c & 31 == 0)) => a,
                        M::Shl => d.const_op(&a, &n, |x, n| x.wrapping_shl(n as u32 & 31)),
                        M::Shr => d.const_op(&a, &n, |x, n| ((x as u32) >> (n as u32 & 31)) as i32),
                        M::Sar => d.const_op(&a, &n, |x, n| x >> (n as u32 & 31)),
                        _ => AbsValue::Top,
                    }
                } else {
                    AbsValue::Top
                };
                self.write(s, &ops[0], v);
            }
            M::Cdq => {
                let v = d.const_map(s.reg(Reg::Eax), |c| if c < 0 { -1 } else { 0 });
                s.set_reg(Reg::Edx, v);
            }
            M::Cwde => {
                let v = d.const_map(s.reg(Reg::Eax), |c| c as i16 as i32);
                s.set_reg(Reg::Eax, v);
            }
            M::Xchg => {
                let a = self.read(s, &ops[0]);
                let b = self.read(s, &ops[1]);
                self.write(s, &ops[0], b);
                self.write(s, &ops[1], a);
            }
            M::Leave => {
                s.set_reg(Reg::Esp, s.reg(Reg::Ebp).clone());
                let v = self.pop(s, 4);
                s.set_reg(Reg::Ebp, v);
            }
            M::Enter => {
                let ebp = s.reg(Reg::Ebp).clone();
                self.push(s, ebp, 4);
                let frame = s.reg(Reg::Esp).clone();
                let size = ins.operands.first().and_then(|o| match o {
                    Operand::Imm { value } => Some(*value),
                    _ => None,
                });
                let nested = matches!(ins.operands.get(1), Some(Operand::Imm { value }) if *value != 0);
                match size {
                    Some(n) if !nested => {
                        s.set_reg(Reg::Esp, d.add_const(&frame, -n));
                        s.set_reg(Reg::Ebp, frame);
                    }
                    _ => Self::clobber(s, &[Reg::Esp, Reg::Ebp]),
                }
            }
            M::Pusha => {
                let esp = d.add_const(s.reg(Reg::Esp), -32);
                self.store(s, &esp, Width::Other, AbsValue::Top);
                let mut end = esp.clone();
                for _ in 0..3 {
                    end = d.add_const(&end, 8);
                    self.store(s, &end, Width::Other, AbsValue::Top);
                }
                s.set_reg(Reg::Esp, esp);
            }
            M::Popa => {
                let esp = d.add_const(s.reg(Reg::Esp), 32);
                Self::clobber(s, &[Reg::Eax, Reg::Ecx, Reg::Edx, Reg::Ebx, Reg::Ebp, Reg::Esi, Reg::Edi]);
                s.set_reg(Reg::Esp, esp);
            }
            M::Pushf => self.push(s, AbsValue::Top, 4),
            M::Popf => {
                self.pop(s, 4);
            }
            M::Call | M::CallFar => {
                if let Some(offs) = s.reg(Reg::Esp).stack_offsets() {
                    if let Some(&low) = offs.iter().min() {
                        let below: Vec<i64> = s.slots.range(..low).map(|(k, _)| *k).collect();
                        for k in below {
                            s.slots.remove(&k);
                        }
                    }
                }
                Self::clobber(s, &[Reg::Eax, Reg::Ecx, Reg::Edx]);
                if let Flow::Call { target } = ins.flow {
                    if let Some(&pop) = usize::try_from(target).ok().and_then(|t| self.callee_pops.get(&t)) {
                        let esp = d.add_const(s.reg(Reg::Esp), pop as i64);
                        s.set_reg(Reg::Esp, esp);
                    }
                }
            }
            M::Cmovcc(_) => {
                let a = self.read(s, &ops[0]);
                let b = self.read(s, &ops[1]);
                self.write(s, &ops[0], d.join(&a, &b));
            }
            M::Setcc(_) | M::Bswap | M::Shld | M::Shrd | M::Bts | M::Btr | M::Btc | M::Les | M::Lds
            | M::Arpl | M::In => {
                self.write(s, &ops[0], AbsValue::Top);
            }
            M::Movs | M::Stos | M::Ins => {
                Self::clobber_through(s, Reg::Edi);
                Self::clobber(s, &[Reg::Ecx, Reg::Esi, Reg::Edi]);
            }
            M::Lods | M::Scas | M::Cmps | M::Outs => {
                Self::clobber(s, &[Reg::Eax, Reg::Ecx, Reg::Esi, Reg::Edi]);
            }
            M::Loop | M::Loope | M::Loopne => {
                let v = d.add_const(s.reg(Reg::Ecx), -1);
                s.set_reg(Reg::Ecx, v);
            }
            M::Cpuid => Self::clobber(s, &[Reg::Eax, Reg::Ebx, Reg::Ecx, Reg::Edx]),
            M::Rdtsc => Self::clobber(s, &[Reg::Eax, Reg::Edx]),
            M::Xlat | M::Lahf | M::Aam | M::Aad | M::Daa | M::Das | M::Aaa | M::Aas | M::Int | M::Int3
            | M::Into | M::Iret | M::Sahf => Self::clobber(s, &[Reg::Eax]),
            M::Fpu => {
                if let Some(Operand::Mem { mem, .. }) = ops.first() {
                    let a = self.address(s, mem);
                    self.store(s, &a, Width::Other, AbsValue::Top);
                }
            }
            _ => {}
        }
    }

    /// Narrows the state on one edge out of a `cmp loc, imm` / `test r, r`
    /// followed by `jcc`. `None` means the edge is infeasible.
    fn refine(&self, out: &AbsState, block: &[DecodedInstr], kind: EdgeKind) -> Option<AbsState> {
        let n = block.len();
        if n < 2 {
            return Some(out.clone());
        }
        let (jcc, prev) = (&block[n - 1], &block[n - 2]);
        let Mnemonic::Jcc(cond) = jcc.mnemonic else {
            return Some(out.clone());
        };
        let cond = match kind {
            EdgeKind::Taken => cond,
            EdgeKind::Fallthrough => cond.negate(),
            _ => return Some(out.clone()),
        };
        let (loc, imm) = match (prev.mnemonic, prev.operands.as_slice()) {
            (Mnemonic::Cmp, [loc, Operand::Imm { value }]) => (*loc, *value),
            (Mnemonic::Test, [a, b]) if a == b && matches!(a, Operand::Reg(_)) => (*a, 0),
            _ => return Some(out.clone()),
        };
        // The state after `jcc` equals the state after the compare.
        let slot = match &loc {
            Operand::Reg(g) if g.width == Width::Dword => None,
            Operand::Mem { mem, width: Width::Dword } => match self.address(out, mem).stack_offsets() {
                Some(o) if o.len() == 1 => Some(o[0]),
                _ => return Some(out.clone()),
            },
            _ => return Some(out.clone()),
        };
        let value = match slot {
            Some(o) => out.slot(o),
            None => self.read(out, &loc),
        };
        let Some(consts) = value.consts() else {
            return Some(out.clone());
        };
        let kept: Vec<AbsLoc> = consts
            .into_iter()
            .filter(|&c| cond_holds(cond, c, imm).unwrap_or(true))
            .map(|c| AbsLoc { base: AbsBase::Const, offset: c })
            .collect();
        if kept.is_empty() {
            return None;
        }
        let mut s = out.clone();
        let v = AbsValue::Set(kept.into_iter().collect());
        match slot {
            Some(o) => {
                s.slots.insert(o, v);
            }
            None => self.write(&mut s, &loc, v),
        }
        Some(s)
    }
}

/// Outcome of `cmp a, b; j<cond>` on 32-bit values; `None` when the flags
/// involved are not determined by the comparison alone.
pub fn cond_holds(cond: Cond, a: i64, b: i64) -> Option<bool> {
    let (sa, sb) = (wrap32(a) as i32, wrap32(b) as i32);
    let (ua, ub) = (sa as u32, sb as u32);
    Some(match cond {
        Cond::E => sa == sb,
        Cond::Ne => sa != sb,
        Cond::L => sa < sb,
        Cond::Ge => sa >= sb,
        Cond::Le => sa <= sb,
        Cond::G => sa > sb,
        Cond::B => ua < ub,
        Cond::Ae => ua >= ub,
        Cond::Be => ua <= ub,
        Cond::A => ua > ub,
        _ => return None,
    })
}

/// Value-set analysis of one function: worklist iteration in reverse
/// post-order, widening each block's entry state once it has changed more
/// than `widen_after` times.
pub fn func_wise_vsa(
    f: &FunctionCfg,
    regions: &RegionTable,
    callee_pops: &BTreeMap<usize, u16>,
    cfg: &VsaConfig,
) -> Result<VsaResult, VsaError> {
    let t = Transfer { d: Domain { k: cfg.k, regions }, max_slots: cfg.max_slots, callee_pops };
    let n = f.blocks.len();
    let mut result = VsaResult { function: f.name.clone(), entry: f.entry, states: BTreeMap::new() };
    let Some(entry) = f.block_at(f.entry) else {
        return Ok(result);
    };
    let order = reverse_postorder(f, entry);
    let mut rank = vec![usize::MAX; n];
    for (i, &b) in order.iter().enumerate() {
        rank[b] = i;
    }

    let mut ins: Vec<Option<AbsState>> = vec![None; n];
    let mut changes = vec![0usize; n];
    ins[entry] = Some(AbsState::entry());
    let mut work: BTreeSet<(usize, usize)> = [(rank[entry], entry)].into();
    let mut visits = 0usize;
    while let Some((_, b)) = work.pop_first() {
        visits += 1;
        if visits > cfg.max_visits {
            return Err(VsaError::NonTermination { function: f.name.clone(), visits });
        }
        let mut s = ins[b].clone().expect("queued blocks have a state");
        let block = &f.blocks[b];
        let body = f.block_instrs(block);
        for i in body {
            t.step(&mut s, i);
        }
        for e in &block.succs {
            let Some(next) = t.refine(&s, body, e.kind) else {
                continue;
            };
            let updated = match &ins[e.to] {
                None => Some(next),
                Some(old) => {
                    let j = old.join(&next, &t.d);
                    if &j == old {
                        None
                    } else {
                        changes[e.to] += 1;
                        Some(if changes[e.to] > cfg.widen_after { old.widen(&j) } else { j })
                    }
                }
            };
            if let Some(u) = updated {
                ins[e.to] = Some(u);
                work.insert((rank[e.to], e.to));
            }
        }
    }

    for (b, state) in ins.iter().enumerate() {
        let Some(state) = state else { continue };
        let mut s = state.clone();
        for i in f.block_instrs(&f.blocks[b]) {
            result.states.insert(i.offset, s.clone());
            t.step(&mut s, i);
        }
    }
    Ok(result)
}

fn reverse_postorder(f: &FunctionCfg, entry: usize) -> Vec<usize> {
    let n = f.blocks.len();
    let mut seen = vec![false; n];
    let mut post = Vec::with_capacity(n);
    let mut stack = vec![(entry, 0usize)];
    seen[entry] = true;
    while let Some((b, i)) = stack.pop() {
        if let Some(e) = f.blocks[b].succs.get(i) {
            stack.push((b, i + 1));
            if !seen[e.to] {
                seen[e.to] = true;
                stack.push((e.to, 0));
            }
        } else {
            post.push(b);
        }
    }
    // Unreachable blocks keep a rank so they can still be ordered.
    for (b, s) in seen.iter().enumerate() {
        if !s {
            post.insert(0, b);
        }
    }
    post.reverse();
    post
}

/// Callee `ret imm` sizes for every function in `funcs`.
pub fn callee_pops(funcs: &[FunctionCfg]) -> BTreeMap<usize, u16> {
    funcs.iter().filter_map(|f| f.ret_pop.map(|p| (f.entry, p))).collect()
}

/// Runs the analysis on every function.
pub fn vsa_all(funcs: &[FunctionCfg], regions: &RegionTable, cfg: &VsaConfig) -> Result<Vec<VsaResult>, VsaError> {
    let pops = callee_pops(funcs);
    funcs.iter().map(|f| func_wise_vsa(f, regions, &pops, cfg)).collect()
}
