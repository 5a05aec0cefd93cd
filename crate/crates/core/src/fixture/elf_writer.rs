//! Writes minimal ELF32 i386 executables: one `PT_LOAD` per allocated
//! section, a `.symtab` and any raw debug sections.

use crate::loader::elf::{SHF_ALLOC, SHF_EXECINSTR, SHT_NOBITS, SHT_PROGBITS, SHT_SYMTAB, STT_FUNC, STT_OBJECT};

const SHT_STRTAB: u32 = 3;
const SHF_WRITE: u32 = 0x1;
const PAGE: usize = 0x1000;

#[derive(Clone, Debug)]
pub enum SectionBody {
    Bytes(Vec<u8>),
    /// Zero-initialised, occupies no file space.
    NoBits(u32),
}

#[derive(Clone, Debug)]
pub struct OutSection {
    pub name: String,
    pub vaddr: u32,
    pub exec: bool,
    pub write: bool,
    pub body: SectionBody,
}

impl OutSection {
    pub fn code(name: &str, vaddr: u32, bytes: Vec<u8>) -> OutSection {
        OutSection { name: name.into(), vaddr, exec: true, write: false, body: SectionBody::Bytes(bytes) }
    }

    pub fn data(name: &str, vaddr: u32, write: bool, bytes: Vec<u8>) -> OutSection {
        OutSection { name: name.into(), vaddr, exec: false, write, body: SectionBody::Bytes(bytes) }
    }

    pub fn bss(vaddr: u32, size: u32) -> OutSection {
        OutSection { name: ".bss".into(), vaddr, exec: false, write: true, body: SectionBody::NoBits(size) }
    }

    fn size(&self) -> u32 {
        match &self.body {
            SectionBody::Bytes(b) => b.len() as u32,
            SectionBody::NoBits(n) => *n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutSymbolKind {
    Func,
    Object,
}

#[derive(Clone, Debug)]
pub struct OutSymbol {
    pub name: String,
    pub vaddr: u32,
    pub size: u32,
    pub kind: OutSymbolKind,
    /// Name of the defining section.
    pub section: String,
}

#[derive(Clone, Debug, Default)]
pub struct ElfImage {
    pub entry: u32,
    /// Allocated sections, in any order.
    pub sections: Vec<OutSection>,
    pub symbols: Vec<OutSymbol>,
    /// Emit a `.symtab` even when `symbols` is empty; `false` models a
    /// stripped binary.
    pub symtab: bool,
    /// Non-allocated sections such as `.debug_info`.
    pub debug: Vec<(String, Vec<u8>)>,
}

struct Header {
    name: u32,
    kind: u32,
    flags: u32,
    addr: u32,
    offset: u32,
    size: u32,
    link: u32,
    info: u32,
    align: u32,
    entsize: u32,
}

struct StrTab(Vec<u8>);

impl StrTab {
    fn new() -> StrTab {
        StrTab(vec![0])
    }

    fn add(&mut self, s: &str) -> u32 {
        let at = self.0.len() as u32;
        self.0.extend_from_slice(s.as_bytes());
        self.0.push(0);
        at
    }
}

fn put16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn write_elf32(img: &ElfImage) -> Vec<u8> {
    let mut alloc: Vec<&OutSection> = img.sections.iter().collect();
    alloc.sort_by_key(|s| s.vaddr);

    let phnum = alloc.len();
    let mut file = vec![0u8; 52 + 32 * phnum];
    let mut shstr = StrTab::new();
    let mut headers = vec![Header {
        name: 0,
        kind: 0,
        flags: 0,
        addr: 0,
        offset: 0,
        size: 0,
        link: 0,
        info: 0,
        align: 0,
        entsize: 0,
    }];
    let mut phdrs = Vec::new();

    for s in &alloc {
        // Keep file offsets congruent to addresses modulo the page size.
        let want = s.vaddr as usize % PAGE;
        while file.len() % PAGE != want {
            file.push(0);
        }
        let offset = file.len() as u32;
        let (kind, filesz) = match &s.body {
            SectionBody::Bytes(b) => {
                file.extend_from_slice(b);
                (SHT_PROGBITS, b.len() as u32)
            }
            SectionBody::NoBits(_) => (SHT_NOBITS, 0),
        };
        let mut flags = SHF_ALLOC;
        if s.exec {
            flags |= SHF_EXECINSTR;
        }
        if s.write {
            flags |= SHF_WRITE;
        }
        headers.push(Header {
            name: shstr.add(&s.name),
            kind,
            flags,
            addr: s.vaddr,
            offset,
            size: s.size(),
            link: 0,
            info: 0,
            align: if s.exec { 16 } else { 4 },
            entsize: 0,
        });
        let pflags = 4 | if s.write { 2 } else { 0 } | if s.exec { 1 } else { 0 };
        phdrs.push((offset, s.vaddr, filesz, s.size(), pflags));
    }

    for (name, bytes) in &img.debug {
        let offset = file.len() as u32;
        file.extend_from_slice(bytes);
        headers.push(Header {
            name: shstr.add(name),
            kind: SHT_PROGBITS,
            flags: 0,
            addr: 0,
            offset,
            size: bytes.len() as u32,
            link: 0,
            info: 0,
            align: 1,
            entsize: 0,
        });
    }

    if img.symtab {
        let mut strtab = StrTab::new();
        let mut symtab = vec![0u8; 16];
        for sym in &img.symbols {
            let shndx = alloc
                .iter()
                .position(|s| s.name == sym.section)
                .map_or(0xfff1, |i| (i + 1) as u16);
            put32(&mut symtab, strtab.add(&sym.name));
            put32(&mut symtab, sym.vaddr);
            put32(&mut symtab, sym.size);
            let kind = match sym.kind {
                OutSymbolKind::Func => STT_FUNC,
                OutSymbolKind::Object => STT_OBJECT,
            };
            symtab.push((1 << 4) | kind);
            symtab.push(0);
            put16(&mut symtab, shndx);
        }
        while file.len() % 4 != 0 {
            file.push(0);
        }
        let symtab_index = headers.len() as u32;
        let offset = file.len() as u32;
        file.extend_from_slice(&symtab);
        headers.push(Header {
            name: shstr.add(".symtab"),
            kind: SHT_SYMTAB,
            flags: 0,
            addr: 0,
            offset,
            size: symtab.len() as u32,
            link: symtab_index + 1,
            info: 1,
            align: 4,
            entsize: 16,
        });
        let offset = file.len() as u32;
        file.extend_from_slice(&strtab.0);
        headers.push(Header {
            name: shstr.add(".strtab"),
            kind: SHT_STRTAB,
            flags: 0,
            addr: 0,
            offset,
            size: strtab.0.len() as u32,
            link: 0,
            info: 0,
            align: 1,
            entsize: 0,
        });
    }

    let shstrndx = headers.len();
    let name = shstr.add(".shstrtab");
    let offset = file.len() as u32;
    file.extend_from_slice(&shstr.0);
    headers.push(Header {
        name,
        kind: SHT_STRTAB,
        flags: 0,
        addr: 0,
        offset,
        size: shstr.0.len() as u32,
        link: 0,
        info: 0,
        align: 1,
        entsize: 0,
    });

    while file.len() % 4 != 0 {
        file.push(0);
    }
    let shoff = file.len() as u32;
    for h in &headers {
        for v in [h.name, h.kind, h.flags, h.addr, h.offset, h.size, h.link, h.info, h.align, h.entsize] {
            put32(&mut file, v);
        }
    }

    let mut ehdr = Vec::with_capacity(52);
    ehdr.extend_from_slice(b"\x7fELF");
    ehdr.extend_from_slice(&[1, 1, 1, 0]);
    ehdr.extend_from_slice(&[0; 8]);
    put16(&mut ehdr, 2);
    put16(&mut ehdr, 3);
    put32(&mut ehdr, 1);
    put32(&mut ehdr, img.entry);
    put32(&mut ehdr, if phnum > 0 { 52 } else { 0 });
    put32(&mut ehdr, shoff);
    put32(&mut ehdr, 0);
    put16(&mut ehdr, 52);
    put16(&mut ehdr, 32);
    put16(&mut ehdr, phnum as u16);
    put16(&mut ehdr, 40);
    put16(&mut ehdr, headers.len() as u16);
    put16(&mut ehdr, shstrndx as u16);
    file[..52].copy_from_slice(&ehdr);

    for (i, (offset, vaddr, filesz, memsz, flags)) in phdrs.into_iter().enumerate() {
        let mut ph = Vec::with_capacity(32);
        for v in [1, offset, vaddr, vaddr, filesz, memsz, flags, PAGE as u32] {
            put32(&mut ph, v);
        }
        file[52 + 32 * i..52 + 32 * (i + 1)].copy_from_slice(&ph);
    }
    file
}
