//! Value-set-to-region translation: memory-block boundaries from predicted
//! code, and boundary-relevant instructions from ground-truth boundaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::analysis::{Transfer, VsaResult};
use super::cfg::FunctionCfg;
use super::domain::{AbsBase, AbsValue, Domain};
use crate::loader::{GlobalRegion, RegionTable};

/// Block start offsets per global region and per function stack frame.
/// Stack offsets are relative to the stack pointer at function entry.
///
/// Serialized as one flat `{name: [offsets]}` map; keys that name a global
/// region (`rodata`, `data`, `bss`) are global, all others are functions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BoundarySet {
    pub global: BTreeMap<GlobalRegion, BTreeSet<i64>>,
    pub stack: BTreeMap<String, BTreeSet<i64>>,
}

impl Serialize for BoundarySet {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = ser.serialize_map(Some(self.global.len() + self.stack.len()))?;
        for (g, offs) in &self.global {
            m.serialize_entry(g.name(), offs)?;
        }
        for (f, offs) in &self.stack {
            m.serialize_entry(f, offs)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for BoundarySet {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let flat = BTreeMap::<String, BTreeSet<i64>>::deserialize(de)?;
        let mut out = BoundarySet::default();
        for (k, offs) in flat {
            match GlobalRegion::from_name(&k) {
                Some(g) => out.global.entry(g).or_default().extend(offs),
                None => out.stack.entry(k).or_default().extend(offs),
            }
        }
        Ok(out)
    }
}

pub type MemBlockSet = BoundarySet;

impl BoundarySet {
    pub fn insert_global(&mut self, region: GlobalRegion, offset: i64) {
        self.global.entry(region).or_default().insert(offset);
    }

    pub fn insert_stack(&mut self, function: &str, offset: i64) {
        self.stack.entry(function.to_string()).or_default().insert(offset);
    }

    pub fn global_len(&self) -> usize {
        self.global.values().map(BTreeSet::len).sum()
    }

    pub fn stack_len(&self) -> usize {
        self.stack.values().map(BTreeSet::len).sum()
    }

    pub fn len(&self) -> usize {
        self.global_len() + self.stack_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One line per region, e.g. `{8,16,24}@data`.
    pub fn render(&self) -> Vec<String> {
        let globals = self.global.iter().map(|(g, s)| render_set(s, g.name()));
        let stacks = self.stack.iter().map(|(f, s)| render_set(s, f));
        globals.chain(stacks).collect()
    }
}

/// `(o)@region` for a single offset, `{a,b,...}@region` otherwise.
pub fn render_set(offsets: &BTreeSet<i64>, region: &str) -> String {
    let body: Vec<String> = offsets.iter().map(i64::to_string).collect();
    if offsets.len() == 1 {
        format!("({})@{region}", body[0])
    } else {
        format!("{{{}}}@{region}", body.join(","))
    }
}

/// Region one abstract base refers to, as seen from `function`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "lowercase")]
pub enum RegionRef {
    Global(GlobalRegion),
    Stack(String),
}

impl RegionRef {
    pub fn name(&self) -> &str {
        match self {
            RegionRef::Global(g) => g.name(),
            RegionRef::Stack(f) => f,
        }
    }
}

/// Blocks derived from one memory-accessing instruction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derivation {
    pub offset: usize,
    pub region: RegionRef,
    pub offsets: BTreeSet<i64>,
}

impl fmt::Display for Derivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_set(&self.offsets, self.region.name()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemBlocks {
    pub blocks: MemBlockSet,
    pub derivations: Vec<Derivation>,
}

/// Address value sets of every reachable explicit memory operand.
fn mem_addresses<'a>(
    f: &'a FunctionCfg,
    r: &'a VsaResult,
    t: &'a Transfer<'a>,
) -> impl Iterator<Item = (usize, AbsValue)> + 'a {
    f.instrs.iter().filter_map(move |ins| {
        let mem = ins.mem_operand.as_ref()?;
        let state = r.states.get(&ins.offset)?;
        Some((ins.offset, t.address(state, mem)))
    })
}

fn split(function: &str, v: &AbsValue) -> BTreeMap<RegionRef, BTreeSet<i64>> {
    let mut out: BTreeMap<RegionRef, BTreeSet<i64>> = BTreeMap::new();
    for l in v.locs().into_iter().flatten() {
        let key = match l.base {
            AbsBase::StackInit => RegionRef::Stack(function.to_string()),
            AbsBase::Global(g) => RegionRef::Global(g),
            AbsBase::Const => continue,
        };
        out.entry(key).or_default().insert(l.offset);
    }
    out
}

/// bVTR: memory-block starts accessed by the instructions in `predictions`
/// (predicted boundary-relevant offsets). Top addresses and constants
/// outside every region contribute nothing.
pub fn get_mem_blocks_from_disa(
    funcs: &[FunctionCfg],
    results: &[VsaResult],
    predictions: &BTreeSet<usize>,
    regions: &RegionTable,
    k: usize,
) -> MemBlocks {
    let pops = BTreeMap::new();
    let t = Transfer { d: Domain { k, regions }, max_slots: 0, callee_pops: &pops };
    let mut out = MemBlocks::default();
    for (f, r) in funcs.iter().zip(results) {
        for (offset, addr) in mem_addresses(f, r, &t) {
            if !predictions.contains(&offset) {
                continue;
            }
            for (region, offsets) in split(&f.name, &addr) {
                for &o in &offsets {
                    match &region {
                        RegionRef::Global(g) => out.blocks.insert_global(*g, o),
                        RegionRef::Stack(name) => out.blocks.insert_stack(name, o),
                    }
                }
                out.derivations.push(Derivation { offset, region, offsets });
            }
        }
    }
    out
}

/// Boundary-relevant instruction offsets, per function.
pub type BrelSet = BTreeMap<String, BTreeSet<usize>>;

/// iVTR: true instructions whose evaluated address hits a ground-truth block
/// start in the matching region.
pub fn id_instr_touch_mem(
    funcs: &[FunctionCfg],
    results: &[VsaResult],
    boundaries: &BoundarySet,
    regions: &RegionTable,
    k: usize,
) -> BrelSet {
    let pops = BTreeMap::new();
    let t = Transfer { d: Domain { k, regions }, max_slots: 0, callee_pops: &pops };
    let mut out = BrelSet::new();
    for (f, r) in funcs.iter().zip(results) {
        let hits = out.entry(f.name.clone()).or_default();
        for (offset, addr) in mem_addresses(f, r, &t) {
            let touches = split(&f.name, &addr).iter().any(|(region, offs)| {
                let gt = match region {
                    RegionRef::Global(g) => boundaries.global.get(g),
                    RegionRef::Stack(name) => boundaries.stack.get(name),
                };
                gt.is_some_and(|gt| offs.iter().any(|o| gt.contains(o)))
            });
            if touches {
                hits.insert(offset);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering() {
        let mut b = BoundarySet::default();
        b.insert_global(GlobalRegion::Data, 16);
        b.insert_global(GlobalRegion::Data, 8);
        b.insert_global(GlobalRegion::Data, 24);
        b.insert_stack("f", -16);
        assert_eq!(b.render(), vec!["{8,16,24}@data".to_string(), "(-16)@f".to_string()]);
        assert_eq!(b.len(), 4);
        let json = serde_json::to_string(&b).unwrap();
        assert_eq!(json, r#"{"data":[8,16,24],"f":[-16]}"#);
        assert_eq!(serde_json::from_str::<BoundarySet>(&json).unwrap(), b);
    }
}
