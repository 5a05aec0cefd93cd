//! Emits DWARF 4 variable and subprogram DIEs with `gimli::write`.

use std::collections::HashMap;

use gimli::write::{
    Address, AttributeValue, DwarfUnit, EndianVec, Expression, Location, LocationList, Sections, UnitEntryId,
};
use gimli::{Encoding, Format, LittleEndian, Register};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    Int,
    Char,
    Short,
    Pointer,
    Array(Box<DType>, u32),
    Struct { name: String, size: u32 },
    Typedef(String, Box<DType>),
}

impl DType {
    pub fn size(&self) -> u32 {
        match self {
            DType::Int | DType::Pointer => 4,
            DType::Char => 1,
            DType::Short => 2,
            DType::Array(e, n) => e.size() * n,
            DType::Struct { size, .. } => *size,
            DType::Typedef(_, t) => t.size(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DFrameBase {
    Ebp,
    Esp,
    Cfa,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DLoc {
    Addr(u32),
    Fbreg(i64),
    /// `DW_OP_bregN offset` with a DWARF register number.
    Breg(u16, i64),
    /// Register-relative address that must be dereferenced at run time.
    Deref(u16, i64),
    /// A location list with one `[begin, end)` range holding `DW_OP_breg5`.
    List { begin: u32, end: u32, ebp_offset: i64 },
    Missing,
}

#[derive(Clone, Debug)]
pub struct DVar {
    pub name: String,
    pub ty: DType,
    pub loc: DLoc,
}

impl DVar {
    pub fn new(name: &str, ty: DType, loc: DLoc) -> DVar {
        DVar { name: name.into(), ty, loc }
    }
}

#[derive(Clone, Debug)]
pub struct DFunc {
    pub name: String,
    pub low_pc: u32,
    pub len: u32,
    pub frame_base: DFrameBase,
    pub vars: Vec<DVar>,
}

struct Builder {
    dwarf: DwarfUnit,
    types: HashMap<DType, UnitEntryId>,
}

fn add_type(b: &mut Builder, ty: &DType) -> UnitEntryId {
    if let Some(&id) = b.types.get(ty) {
        return id;
    }
    let id = new_type(b, ty);
    b.types.insert(ty.clone(), id);
    id
}

fn new_type(b: &mut Builder, ty: &DType) -> UnitEntryId {
    let root = b.dwarf.unit.root();
    match ty {
        DType::Int | DType::Char | DType::Short => {
            let id = b.dwarf.unit.add(root, gimli::DW_TAG_base_type);
            let (name, enc) = match ty {
                DType::Int => ("int", gimli::DW_ATE_signed),
                DType::Short => ("short", gimli::DW_ATE_signed),
                _ => ("char", gimli::DW_ATE_signed_char),
            };
            let e = b.dwarf.unit.get_mut(id);
            e.set(gimli::DW_AT_name, AttributeValue::String(name.as_bytes().to_vec()));
            e.set(gimli::DW_AT_encoding, AttributeValue::Encoding(enc));
            e.set(gimli::DW_AT_byte_size, AttributeValue::Data1(ty.size() as u8));
            id
        }
        DType::Pointer => {
            let id = b.dwarf.unit.add(root, gimli::DW_TAG_pointer_type);
            b.dwarf.unit.get_mut(id).set(gimli::DW_AT_byte_size, AttributeValue::Data1(4));
            id
        }
        DType::Array(elem, n) => {
            let elem_id = add_type(b, elem);
            let id = b.dwarf.unit.add(root, gimli::DW_TAG_array_type);
            b.dwarf.unit.get_mut(id).set(gimli::DW_AT_type, AttributeValue::UnitRef(elem_id));
            let sub = b.dwarf.unit.add(id, gimli::DW_TAG_subrange_type);
            b.dwarf.unit.get_mut(sub).set(gimli::DW_AT_count, AttributeValue::Udata(*n as u64));
            id
        }
        DType::Struct { name, size } => {
            let id = b.dwarf.unit.add(root, gimli::DW_TAG_structure_type);
            let e = b.dwarf.unit.get_mut(id);
            e.set(gimli::DW_AT_name, AttributeValue::String(name.as_bytes().to_vec()));
            e.set(gimli::DW_AT_byte_size, AttributeValue::Udata(*size as u64));
            id
        }
        DType::Typedef(name, inner) => {
            let inner_id = add_type(b, inner);
            let id = b.dwarf.unit.add(root, gimli::DW_TAG_typedef);
            let e = b.dwarf.unit.get_mut(id);
            e.set(gimli::DW_AT_name, AttributeValue::String(name.as_bytes().to_vec()));
            e.set(gimli::DW_AT_type, AttributeValue::UnitRef(inner_id));
            id
        }
    }
}

fn add_var(b: &mut Builder, parent: UnitEntryId, v: &DVar) {
    let ty = add_type(b, &v.ty);
    let id = b.dwarf.unit.add(parent, gimli::DW_TAG_variable);
    let location = match v.loc {
        DLoc::Addr(a) => {
            let mut x = Expression::new();
            x.op_addr(Address::Constant(a as u64));
            Some(AttributeValue::Exprloc(x))
        }
        DLoc::Fbreg(off) => {
            let mut x = Expression::new();
            x.op_fbreg(off);
            Some(AttributeValue::Exprloc(x))
        }
        DLoc::Breg(reg, off) => {
            let mut x = Expression::new();
            x.op_breg(Register(reg), off);
            Some(AttributeValue::Exprloc(x))
        }
        DLoc::Deref(reg, off) => {
            let mut x = Expression::new();
            x.op_breg(Register(reg), off);
            x.op(gimli::DW_OP_deref);
            Some(AttributeValue::Exprloc(x))
        }
        DLoc::List { begin, end, ebp_offset } => {
            let mut x = Expression::new();
            x.op_breg(Register(5), ebp_offset);
            let list = LocationList(vec![Location::StartEnd {
                begin: Address::Constant(begin as u64),
                end: Address::Constant(end as u64),
                data: x,
            }]);
            let lid = b.dwarf.unit.locations.add(list);
            Some(AttributeValue::LocationListRef(lid))
        }
        DLoc::Missing => None,
    };
    let e = b.dwarf.unit.get_mut(id);
    e.set(gimli::DW_AT_name, AttributeValue::String(v.name.as_bytes().to_vec()));
    e.set(gimli::DW_AT_type, AttributeValue::UnitRef(ty));
    if let Some(loc) = location {
        e.set(gimli::DW_AT_location, loc);
    }
}

/// One compile unit holding `globals` at file scope and one subprogram per
/// entry of `funcs`. Returns `(section name, bytes)` for every non-empty
/// debug section.
pub fn build_dwarf(cu_name: &str, funcs: &[DFunc], globals: &[DVar]) -> Vec<(String, Vec<u8>)> {
    let encoding = Encoding { format: Format::Dwarf32, version: 4, address_size: 4 };
    let mut b = Builder { dwarf: DwarfUnit::new(encoding), types: HashMap::new() };
    let root = b.dwarf.unit.root();
    let e = b.dwarf.unit.get_mut(root);
    e.set(gimli::DW_AT_name, AttributeValue::String(cu_name.as_bytes().to_vec()));
    e.set(gimli::DW_AT_language, AttributeValue::Language(gimli::DW_LANG_C99));
    if let (Some(lo), Some(hi)) = (
        funcs.iter().map(|f| f.low_pc).min(),
        funcs.iter().map(|f| f.low_pc + f.len).max(),
    ) {
        e.set(gimli::DW_AT_low_pc, AttributeValue::Address(Address::Constant(lo as u64)));
        e.set(gimli::DW_AT_high_pc, AttributeValue::Udata((hi - lo) as u64));
    }

    for g in globals {
        add_var(&mut b, root, g);
    }
    for f in funcs {
        let id = b.dwarf.unit.add(root, gimli::DW_TAG_subprogram);
        let mut fb = Expression::new();
        match f.frame_base {
            DFrameBase::Ebp => fb.op(gimli::DW_OP_reg5),
            DFrameBase::Esp => fb.op(gimli::DW_OP_reg4),
            DFrameBase::Cfa => fb.op(gimli::DW_OP_call_frame_cfa),
        }
        let e = b.dwarf.unit.get_mut(id);
        e.set(gimli::DW_AT_name, AttributeValue::String(f.name.as_bytes().to_vec()));
        e.set(gimli::DW_AT_low_pc, AttributeValue::Address(Address::Constant(f.low_pc as u64)));
        e.set(gimli::DW_AT_high_pc, AttributeValue::Udata(f.len as u64));
        e.set(gimli::DW_AT_frame_base, AttributeValue::Exprloc(fb));
        for v in &f.vars {
            add_var(&mut b, id, v);
        }
    }

    let mut sections = Sections::new(EndianVec::new(LittleEndian));
    b.dwarf.write(&mut sections).expect("fixture DWARF is well-formed");
    let mut out = Vec::new();
    sections
        .for_each(|id, data| {
            if !data.slice().is_empty() {
                out.push((id.name().to_string(), data.slice().to_vec()));
            }
            Ok::<_, gimli::write::Error>(())
        })
        .expect("writing to memory cannot fail");
    out
}
