//! Abstract values: bounded sets of `(base, offset)` pairs, plus the per-point
//! state of registers and 4-byte stack slots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::loader::{GlobalRegion, RegionTable};
use crate::superset::Reg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AbsBase {
    /// The stack pointer at function entry.
    StackInit,
    Global(GlobalRegion),
    Const,
}

/// One abstract location. Offsets are kept sign-extended from 32 bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AbsLoc {
    pub base: AbsBase,
    pub offset: i64,
}

impl fmt::Display for AbsLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.base {
            AbsBase::StackInit => write!(f, "(StackInit,{})", self.offset),
            AbsBase::Global(g) => write!(f, "({},{})", g.name(), self.offset),
            AbsBase::Const => write!(f, "(Const,{})", self.offset),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum AbsValue {
    Top,
    Set(BTreeSet<AbsLoc>),
}

impl fmt::Display for AbsValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbsValue::Top => f.write_str("Top"),
            AbsValue::Set(s) => {
                f.write_str("{")?;
                for (i, l) in s.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{l}")?;
                }
                f.write_str("}")
            }
        }
    }
}

pub(crate) fn wrap32(x: i64) -> i64 {
    x as i32 as i64
}

impl AbsValue {
    pub fn is_top(&self) -> bool {
        matches!(self, AbsValue::Top)
    }

    pub fn single(base: AbsBase, offset: i64) -> AbsValue {
        AbsValue::Set([AbsLoc { base, offset: wrap32(offset) }].into())
    }

    pub fn locs(&self) -> Option<&BTreeSet<AbsLoc>> {
        match self {
            AbsValue::Top => None,
            AbsValue::Set(s) => Some(s),
        }
    }

    /// Constant members, when every member is a constant.
    pub fn consts(&self) -> Option<Vec<i64>> {
        let s = self.locs()?;
        s.iter().all(|l| l.base == AbsBase::Const).then(|| s.iter().map(|l| l.offset).collect())
    }

    /// Stack offsets, when every member is stack-relative.
    pub fn stack_offsets(&self) -> Option<Vec<i64>> {
        let s = self.locs()?;
        s.iter().all(|l| l.base == AbsBase::StackInit).then(|| s.iter().map(|l| l.offset).collect())
    }

    pub fn contains(&self, loc: &AbsLoc) -> bool {
        match self {
            AbsValue::Top => true,
            AbsValue::Set(s) => s.contains(loc),
        }
    }
}

/// Set-size bound and region table shared by all value operations.
#[derive(Clone, Copy)]
pub struct Domain<'a> {
    pub k: usize,
    pub regions: &'a RegionTable,
}

impl Domain<'_> {
    fn canon(&self, loc: AbsLoc) -> AbsLoc {
        if loc.base == AbsBase::Const {
            if let Some((g, off)) = self.regions.locate(loc.offset as u32 as i64) {
                return AbsLoc { base: AbsBase::Global(g), offset: off };
            }
        }
        AbsLoc { base: loc.base, offset: wrap32(loc.offset) }
    }

    pub fn from_locs(&self, locs: impl IntoIterator<Item = AbsLoc>) -> AbsValue {
        let mut out = BTreeSet::new();
        for l in locs {
            out.insert(self.canon(l));
            if out.len() > self.k {
                return AbsValue::Top;
            }
        }
        AbsValue::Set(out)
    }

    pub fn konst(&self, c: i64) -> AbsValue {
        self.from_locs([AbsLoc { base: AbsBase::Const, offset: c }])
    }

    pub fn join(&self, a: &AbsValue, b: &AbsValue) -> AbsValue {
        match (a, b) {
            (AbsValue::Set(x), AbsValue::Set(y)) => {
                if x.len() + y.len() <= self.k {
                    AbsValue::Set(x.union(y).copied().collect())
                } else {
                    self.from_locs(x.union(y).copied())
                }
            }
            _ => AbsValue::Top,
        }
    }

    fn pairwise(&self, a: &AbsValue, b: &AbsValue, f: impl Fn(AbsLoc, AbsLoc) -> Option<AbsLoc>) -> AbsValue {
        let (Some(x), Some(y)) = (a.locs(), b.locs()) else {
            return AbsValue::Top;
        };
        if x.len() * y.len() > self.k * self.k {
            return AbsValue::Top;
        }
        let mut out = Vec::with_capacity(x.len() * y.len());
        for &p in x {
            for &q in y {
                match f(p, q) {
                    Some(l) => out.push(l),
                    None => return AbsValue::Top,
                }
            }
        }
        self.from_locs(out)
    }

    pub fn add(&self, a: &AbsValue, b: &AbsValue) -> AbsValue {
        self.pairwise(a, b, |p, q| match (p.base, q.base) {
            (_, AbsBase::Const) => Some(AbsLoc { base: p.base, offset: p.offset + q.offset }),
            (AbsBase::Const, _) => Some(AbsLoc { base: q.base, offset: p.offset + q.offset }),
            _ => None,
        })
    }

    pub fn sub(&self, a: &AbsValue, b: &AbsValue) -> AbsValue {
        self.pairwise(a, b, |p, q| match (p.base, q.base) {
            (_, AbsBase::Const) => Some(AbsLoc { base: p.base, offset: p.offset - q.offset }),
            (x, y) if x == y => Some(AbsLoc { base: AbsBase::Const, offset: p.offset - q.offset }),
            _ => None,
        })
    }

    pub fn add_const(&self, a: &AbsValue, c: i64) -> AbsValue {
        self.add(a, &AbsValue::single(AbsBase::Const, c))
    }

    /// Applies `f` to 32-bit constants; anything non-constant yields Top.
    pub fn const_op(&self, a: &AbsValue, b: &AbsValue, f: impl Fn(i32, i32) -> i32) -> AbsValue {
        self.pairwise(a, b, |p, q| {
            (p.base == AbsBase::Const && q.base == AbsBase::Const).then(|| AbsLoc {
                base: AbsBase::Const,
                offset: f(p.offset as i32, q.offset as i32) as i64,
            })
        })
    }

    /// `a * b`. A singleton constant factor of 1 keeps `a` and 0 gives 0,
    /// whatever the base of `a`.
    pub fn mul(&self, a: &AbsValue, b: &AbsValue) -> AbsValue {
        match b.consts().as_deref() {
            Some([1]) => return a.clone(),
            Some([0]) => return self.konst(0),
            _ => {}
        }
        match a.consts().as_deref() {
            Some([1]) => return b.clone(),
            Some([0]) => return self.konst(0),
            _ => {}
        }
        self.const_op(a, b, |x, y| x.wrapping_mul(y))
    }

    pub fn const_map(&self, a: &AbsValue, f: impl Fn(i32) -> i32) -> AbsValue {
        match a.consts() {
            Some(cs) => self.from_locs(cs.into_iter().map(|c| AbsLoc { base: AbsBase::Const, offset: f(c as i32) as i64 })),
            None => AbsValue::Top,
        }
    }

    /// `a * n` for a constant multiplier; non-constant `a` survives only `n == 1`.
    pub fn scale(&self, a: &AbsValue, n: u8) -> AbsValue {
        if n == 1 {
            return a.clone();
        }
        self.const_map(a, |c| c.wrapping_mul(n as i32))
    }
}

/// Registers and the 4-byte stack cells at fixed offsets from `StackInit`.
/// Absent slots are Top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbsState {
    pub regs: [AbsValue; 8],
    pub slots: BTreeMap<i64, AbsValue>,
}

impl AbsState {
    /// Function entry: `esp` is `StackInit`, everything else unknown.
    pub fn entry() -> AbsState {
        let mut regs: [AbsValue; 8] = std::array::from_fn(|_| AbsValue::Top);
        regs[Reg::Esp.index()] = AbsValue::single(AbsBase::StackInit, 0);
        AbsState { regs, slots: BTreeMap::new() }
    }

    pub fn reg(&self, r: Reg) -> &AbsValue {
        &self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, v: AbsValue) {
        self.regs[r.index()] = v;
    }

    pub fn slot(&self, offset: i64) -> AbsValue {
        self.slots.get(&offset).cloned().unwrap_or(AbsValue::Top)
    }

    pub fn join(&self, other: &AbsState, d: &Domain) -> AbsState {
        let regs = std::array::from_fn(|i| d.join(&self.regs[i], &other.regs[i]));
        let mut slots = BTreeMap::new();
        for (k, v) in &self.slots {
            if let Some(w) = other.slots.get(k) {
                let j = d.join(v, w);
                if !j.is_top() {
                    slots.insert(*k, j);
                }
            }
        }
        AbsState { regs, slots }
    }

    /// Sends every component that differs between `self` and `next` to Top.
    pub fn widen(&self, next: &AbsState) -> AbsState {
        let regs = std::array::from_fn(|i| {
            if self.regs[i] == next.regs[i] {
                next.regs[i].clone()
            } else {
                AbsValue::Top
            }
        });
        let slots = next
            .slots
            .iter()
            .filter(|(k, v)| self.slots.get(k) == Some(v))
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        AbsState { regs, slots }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loader::RegionRange;

    fn table() -> RegionTable {
        let mut t = RegionTable::default();
        t.insert(GlobalRegion::Data, RegionRange { start: 0x1000, end: 0x10ff });
        t
    }

    #[test]
    fn constants_inside_regions_become_global() {
        let t = table();
        let d = Domain { k: 16, regions: &t };
        let v = d.add(&d.konst(0x1008), &d.konst(8));
        assert_eq!(v, AbsValue::single(AbsBase::Global(GlobalRegion::Data), 0x10));
        assert_eq!(d.konst(0x2000), AbsValue::single(AbsBase::Const, 0x2000));
    }

    #[test]
    fn sets_beyond_k_collapse() {
        let t = table();
        let d = Domain { k: 2, regions: &t };
        let v = d.join(&d.konst(1), &d.konst(2));
        assert!(!v.is_top());
        assert!(d.join(&v, &d.konst(3)).is_top());
    }

    #[test]
    fn stack_difference_is_constant() {
        let t = table();
        let d = Domain { k: 16, regions: &t };
        let a = AbsValue::single(AbsBase::StackInit, -4);
        let b = AbsValue::single(AbsBase::StackInit, -20);
        assert_eq!(d.sub(&a, &b), d.konst(16));
        assert!(d.add(&a, &b).is_top());
    }

    #[test]
    fn join_keeps_common_slots_only() {
        let t = table();
        let d = Domain { k: 16, regions: &t };
        let mut a = AbsState::entry();
        let mut b = AbsState::entry();
        a.slots.insert(-8, d.konst(1));
        a.slots.insert(-12, d.konst(1));
        b.slots.insert(-8, d.konst(2));
        let j = a.join(&b, &d);
        assert_eq!(j.slots.len(), 1);
        assert_eq!(j.slot(-8).consts(), Some(vec![1, 2]));
    }
}
