//! Variable DIEs and their locations, read with `gimli`.
//!
//! Supported location forms: `DW_OP_addr`/`DW_OP_addrx`, `DW_OP_fbreg` (when
//! the subprogram frame base is `ebp`, `esp` or the CFA) and
//! `DW_OP_breg4`/`DW_OP_breg5`. Everything else is skipped and counted.

use std::collections::BTreeMap;

use gimli::{AttributeValue, EndianSlice, LittleEndian, Operation, UnitOffset};
use serde::{Deserialize, Serialize};

type Slice<'a> = EndianSlice<'a, LittleEndian>;
type Unit<'a> = gimli::Unit<Slice<'a>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameBase {
    Ebp,
    Esp,
    /// Canonical frame address: the stack pointer value before the call.
    Cfa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarLocation {
    GlobalAddr { addr: u32 },
    FrameRelative { base: FrameBase, disp: i64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwarfVariable {
    pub name: String,
    pub enclosing_function: Option<String>,
    /// `DW_AT_low_pc` of the enclosing subprogram.
    pub function_addr: Option<u32>,
    pub location: VarLocation,
    pub byte_size: u64,
}

/// Why a variable DIE did not produce a [`DwarfVariable`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoLocation,
    LocationList,
    UnsupportedExpression,
    UnknownSize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwarfReport {
    pub variables: Vec<DwarfVariable>,
    pub skipped: BTreeMap<SkipReason, usize>,
}

impl DwarfReport {
    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum SubprogramBase {
    Reg(FrameBase, i64),
    Unsupported,
}

struct Scope {
    depth: isize,
    name: Option<String>,
    low_pc: Option<u32>,
    frame_base: SubprogramBase,
}

/// Parse variable DIEs out of the debug sections (`.debug_info` and friends,
/// keyed by section name).
pub fn parse_variables(sections: &BTreeMap<String, Vec<u8>>) -> Result<DwarfReport, gimli::Error> {
    let load = |id: gimli::SectionId| -> Result<Slice<'_>, gimli::Error> {
        let data = sections.get(id.name()).map(Vec::as_slice).unwrap_or(&[]);
        Ok(EndianSlice::new(data, LittleEndian))
    };
    let dwarf = gimli::Dwarf::load(load)?;
    let mut report = DwarfReport::default();
    let mut units = dwarf.units();
    while let Some(header) = units.next()? {
        let unit = dwarf.unit(header)?;
        walk_unit(&dwarf, &unit, &mut report)?;
    }
    Ok(report)
}

fn walk_unit(
    dwarf: &gimli::Dwarf<Slice<'_>>,
    unit: &Unit<'_>,
    report: &mut DwarfReport,
) -> Result<(), gimli::Error> {
    let mut scopes: Vec<Scope> = Vec::new();
    let mut depth: isize = 0;
    let mut entries = unit.entries();
    while let Some((delta, entry)) = entries.next_dfs()? {
        depth += delta;
        while scopes.last().is_some_and(|s| s.depth >= depth) {
            scopes.pop();
        }
        match entry.tag() {
            gimli::DW_TAG_subprogram => {
                let name = die_name(dwarf, unit, entry)?;
                let frame_base = match entry.attr_value(gimli::DW_AT_frame_base)? {
                    Some(AttributeValue::Exprloc(expr)) => frame_base(expr, unit.encoding()),
                    _ => SubprogramBase::Unsupported,
                };
                let low_pc = match entry.attr_value(gimli::DW_AT_low_pc)? {
                    Some(v) => dwarf.attr_address(unit, v)?.map(|a| a as u32),
                    None => None,
                };
                scopes.push(Scope { depth, name, low_pc, frame_base });
            }
            gimli::DW_TAG_variable | gimli::DW_TAG_formal_parameter => {
                let scope = scopes.last();
                let location = match entry.attr_value(gimli::DW_AT_location)? {
                    None => Err(SkipReason::NoLocation),
                    Some(AttributeValue::Exprloc(expr)) => {
                        var_location(dwarf, unit, expr, scope.map(|s| s.frame_base))?
                    }
                    Some(AttributeValue::LocationListsRef(_)) | Some(AttributeValue::SecOffset(_)) => {
                        Err(SkipReason::LocationList)
                    }
                    Some(_) => Err(SkipReason::UnsupportedExpression),
                };
                let size = match entry.attr_value(gimli::DW_AT_type)? {
                    Some(AttributeValue::UnitRef(off)) => type_size(unit, off, 0)?,
                    _ => None,
                };
                let result = location.and_then(|loc| match size {
                    Some(n) if n > 0 => Ok((loc, n)),
                    _ => Err(SkipReason::UnknownSize),
                });
                match result {
                    Ok((location, byte_size)) => report.variables.push(DwarfVariable {
                        name: die_name(dwarf, unit, entry)?.unwrap_or_default(),
                        enclosing_function: scope.and_then(|s| s.name.clone()),
                        function_addr: scope.and_then(|s| s.low_pc),
                        location,
                        byte_size,
                    }),
                    Err(reason) => *report.skipped.entry(reason).or_default() += 1,
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn die_name(
    dwarf: &gimli::Dwarf<Slice<'_>>,
    unit: &Unit<'_>,
    entry: &gimli::DebuggingInformationEntry<'_, '_, Slice<'_>>,
) -> Result<Option<String>, gimli::Error> {
    if let Some(v) = entry.attr_value(gimli::DW_AT_name)? {
        let s = dwarf.attr_string(unit, v)?;
        return Ok(Some(s.to_string_lossy().into_owned()));
    }
    for origin in [gimli::DW_AT_abstract_origin, gimli::DW_AT_specification] {
        if let Some(AttributeValue::UnitRef(off)) = entry.attr_value(origin)? {
            let target = unit.entry(off)?;
            if let Some(v) = target.attr_value(gimli::DW_AT_name)? {
                let s = dwarf.attr_string(unit, v)?;
                return Ok(Some(s.to_string_lossy().into_owned()));
            }
        }
    }
    Ok(None)
}

fn dwarf_reg(register: gimli::Register) -> Option<FrameBase> {
    match register.0 {
        4 => Some(FrameBase::Esp),
        5 => Some(FrameBase::Ebp),
        _ => None,
    }
}

/// Evaluate a single-operation expression into an operation; longer
/// expressions are not supported.
fn single_op<'a>(
    expr: gimli::Expression<Slice<'a>>,
    encoding: gimli::Encoding,
) -> Option<Operation<Slice<'a>>> {
    let mut ops = expr.operations(encoding);
    let first = ops.next().ok()??;
    match ops.next() {
        Ok(None) => Some(first),
        _ => None,
    }
}

fn frame_base(expr: gimli::Expression<Slice<'_>>, encoding: gimli::Encoding) -> SubprogramBase {
    match single_op(expr, encoding) {
        Some(Operation::Register { register }) => match dwarf_reg(register) {
            Some(b) => SubprogramBase::Reg(b, 0),
            None => SubprogramBase::Unsupported,
        },
        Some(Operation::RegisterOffset { register, offset, .. }) => match dwarf_reg(register) {
            Some(b) => SubprogramBase::Reg(b, offset),
            None => SubprogramBase::Unsupported,
        },
        Some(Operation::CallFrameCFA) => SubprogramBase::Reg(FrameBase::Cfa, 0),
        _ => SubprogramBase::Unsupported,
    }
}

fn var_location(
    dwarf: &gimli::Dwarf<Slice<'_>>,
    unit: &Unit<'_>,
    expr: gimli::Expression<Slice<'_>>,
    frame: Option<SubprogramBase>,
) -> Result<Result<VarLocation, SkipReason>, gimli::Error> {
    let unsupported = Err(SkipReason::UnsupportedExpression);
    Ok(match single_op(expr, unit.encoding()) {
        Some(Operation::Address { address }) => Ok(VarLocation::GlobalAddr { addr: address as u32 }),
        Some(Operation::AddressIndex { index }) => {
            let address = dwarf.address(unit, index)?;
            Ok(VarLocation::GlobalAddr { addr: address as u32 })
        }
        Some(Operation::FrameOffset { offset }) => match frame {
            Some(SubprogramBase::Reg(base, k)) => Ok(VarLocation::FrameRelative { base, disp: k + offset }),
            _ => unsupported,
        },
        Some(Operation::RegisterOffset { register, offset, .. }) => match dwarf_reg(register) {
            Some(base) => Ok(VarLocation::FrameRelative { base, disp: offset }),
            None => unsupported,
        },
        _ => unsupported,
    })
}

const MAX_TYPE_DEPTH: usize = 16;

fn type_size(unit: &Unit<'_>, off: UnitOffset, depth: usize) -> Result<Option<u64>, gimli::Error> {
    if depth > MAX_TYPE_DEPTH {
        return Ok(None);
    }
    let entry = unit.entry(off)?;
    let byte_size = entry.attr_value(gimli::DW_AT_byte_size)?.and_then(|v| v.udata_value());
    let inner = match entry.attr_value(gimli::DW_AT_type)? {
        Some(AttributeValue::UnitRef(o)) => Some(o),
        _ => None,
    };
    match entry.tag() {
        gimli::DW_TAG_base_type
        | gimli::DW_TAG_structure_type
        | gimli::DW_TAG_union_type
        | gimli::DW_TAG_class_type => Ok(byte_size),
        gimli::DW_TAG_enumeration_type => match byte_size {
            Some(n) => Ok(Some(n)),
            None => inner.map_or(Ok(None), |o| type_size(unit, o, depth + 1)),
        },
        gimli::DW_TAG_pointer_type | gimli::DW_TAG_reference_type => Ok(Some(byte_size.unwrap_or(4))),
        gimli::DW_TAG_typedef
        | gimli::DW_TAG_const_type
        | gimli::DW_TAG_volatile_type
        | gimli::DW_TAG_restrict_type
        | gimli::DW_TAG_atomic_type => inner.map_or(Ok(None), |o| type_size(unit, o, depth + 1)),
        gimli::DW_TAG_array_type => {
            if let Some(n) = byte_size {
                return Ok(Some(n));
            }
            let Some(elem) = inner else { return Ok(None) };
            let Some(elem_size) = type_size(unit, elem, depth + 1)? else {
                return Ok(None);
            };
            let mut count: u64 = 1;
            let mut tree = unit.entries_tree(Some(off))?;
            let root = tree.root()?;
            let mut children = root.children();
            let mut any = false;
            while let Some(child) = children.next()? {
                let e = child.entry();
                if e.tag() != gimli::DW_TAG_subrange_type {
                    continue;
                }
                any = true;
                let n = if let Some(c) = e.attr_value(gimli::DW_AT_count)?.and_then(|v| v.udata_value()) {
                    c
                } else {
                    let lower = e.attr_value(gimli::DW_AT_lower_bound)?.and_then(|v| v.udata_value()).unwrap_or(0);
                    match e.attr_value(gimli::DW_AT_upper_bound)?.and_then(|v| v.udata_value()) {
                        Some(upper) if upper >= lower => upper - lower + 1,
                        _ => return Ok(None),
                    }
                };
                count = count.saturating_mul(n);
            }
            Ok(any.then(|| elem_size.saturating_mul(count)))
        }
        _ => Ok(byte_size),
    }
}
