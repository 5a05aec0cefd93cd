//! Minimal ELF32 little-endian reader: header, section headers and `.symtab`.

use super::LoadError;

pub const SHT_PROGBITS: u32 = 1;
pub const SHT_SYMTAB: u32 = 2;
pub const SHT_NOBITS: u32 = 8;
pub const SHF_ALLOC: u32 = 0x2;
pub const SHF_EXECINSTR: u32 = 0x4;
pub const EM_386: u16 = 3;

pub const STT_OBJECT: u8 = 1;
pub const STT_FUNC: u8 = 2;

#[derive(Clone, Debug)]
pub struct Section {
    pub name: String,
    pub kind: u32,
    pub flags: u32,
    pub addr: u32,
    pub offset: u32,
    pub size: u32,
    pub link: u32,
    pub entsize: u32,
}

impl Section {
    pub fn is_exec(&self) -> bool {
        self.flags & SHF_EXECINSTR != 0 && self.kind == SHT_PROGBITS
    }
}

#[derive(Clone, Debug)]
pub struct RawSymbol {
    pub name: String,
    pub value: u32,
    pub size: u32,
    pub kind: u8,
    pub shndx: u16,
}

pub struct ElfFile<'a> {
    pub data: &'a [u8],
    pub entry: u32,
    pub sections: Vec<Section>,
}

fn u16_at(d: &[u8], off: usize) -> Result<u16, LoadError> {
    d.get(off..off + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or(LoadError::TruncatedFile)
}

fn u32_at(d: &[u8], off: usize) -> Result<u32, LoadError> {
    d.get(off..off + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(LoadError::TruncatedFile)
}

fn cstr(d: &[u8], off: usize) -> String {
    let tail = d.get(off..).unwrap_or(&[]);
    let end = tail.iter().position(|&b| b == 0).unwrap_or(tail.len());
    String::from_utf8_lossy(&tail[..end]).into_owned()
}

impl<'a> ElfFile<'a> {
    pub fn parse(data: &'a [u8]) -> Result<ElfFile<'a>, LoadError> {
        if data.len() < 16 || &data[..4] != b"\x7fELF" {
            return Err(LoadError::NotElf);
        }
        match data[4] {
            1 => {}
            2 => return Err(LoadError::WrongClass),
            _ => return Err(LoadError::NotElf),
        }
        if data[5] != 1 {
            return Err(LoadError::Unsupported("big-endian ELF".into()));
        }
        if data.len() < 52 {
            return Err(LoadError::TruncatedFile);
        }
        let machine = u16_at(data, 18)?;
        if machine != EM_386 {
            return Err(LoadError::Unsupported(format!("e_machine {machine}")));
        }
        let entry = u32_at(data, 24)?;
        let shoff = u32_at(data, 32)? as usize;
        let shentsize = u16_at(data, 46)? as usize;
        let shnum = u16_at(data, 48)? as usize;
        let shstrndx = u16_at(data, 50)? as usize;

        if shnum > 0 && shentsize < 40 {
            return Err(LoadError::TruncatedFile);
        }
        let mut raw = Vec::with_capacity(shnum);
        let mut name_offsets = Vec::with_capacity(shnum);
        for i in 0..shnum {
            let base = shoff + i * shentsize;
            if base + 40 > data.len() {
                return Err(LoadError::TruncatedFile);
            }
            name_offsets.push(u32_at(data, base)? as usize);
            raw.push(Section {
                name: String::new(),
                kind: u32_at(data, base + 4)?,
                flags: u32_at(data, base + 8)?,
                addr: u32_at(data, base + 12)?,
                offset: u32_at(data, base + 16)?,
                size: u32_at(data, base + 20)?,
                link: u32_at(data, base + 24)?,
                entsize: u32_at(data, base + 36)?,
            });
        }
        if let Some(strtab) = raw.get(shstrndx) {
            let names = section_bytes(data, strtab)?;
            for (s, off) in raw.iter_mut().zip(name_offsets) {
                s.name = cstr(names, off);
            }
        }
        for s in &raw {
            if s.kind != SHT_NOBITS {
                section_bytes(data, s)?;
            }
        }
        Ok(ElfFile { data, entry, sections: raw })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn bytes(&self, s: &Section) -> &'a [u8] {
        if s.kind == SHT_NOBITS {
            return &[];
        }
        section_bytes(self.data, s).unwrap_or(&[])
    }

    pub fn symbols(&self) -> Result<Vec<RawSymbol>, LoadError> {
        let Some(symtab) = self.sections.iter().find(|s| s.kind == SHT_SYMTAB) else {
            return Ok(Vec::new());
        };
        let strtab = self.sections.get(symtab.link as usize).ok_or(LoadError::TruncatedFile)?;
        let names = self.bytes(strtab);
        let data = self.bytes(symtab);
        let entsize = if symtab.entsize == 0 { 16 } else { symtab.entsize as usize };
        let mut out = Vec::new();
        for chunk in data.chunks_exact(entsize) {
            out.push(RawSymbol {
                name: cstr(names, u32_at(chunk, 0)? as usize),
                value: u32_at(chunk, 4)?,
                size: u32_at(chunk, 8)?,
                kind: chunk[12] & 0xf,
                shndx: u16_at(chunk, 14)?,
            });
        }
        Ok(out)
    }
}

fn section_bytes<'a>(data: &'a [u8], s: &Section) -> Result<&'a [u8], LoadError> {
    let start = s.offset as usize;
    let end = start.checked_add(s.size as usize).ok_or(LoadError::TruncatedFile)?;
    data.get(start..end).ok_or(LoadError::TruncatedFile)
}
