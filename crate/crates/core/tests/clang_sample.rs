//! End-to-end checks on a small clang-built i386 executable (`data/a.c`).

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::Command;

use supdis::groundtruth::{ext_blk_bnd_dwarf, linear_sweep_ground_truth};
use supdis::loader::{function_entry_offsets, load_elf, GlobalRegion};
use supdis::superset::superset_image;
use supdis::vsa::{build_cfg, id_instr_touch_mem, vsa_all, VsaConfig};

fn sample() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/a.elf")
}

#[test]
fn sweep_agrees_with_objdump() {
    let Ok(out) = Command::new("objdump").args(["-d", "-j", ".text"]).arg(sample()).output() else {
        eprintln!("objdump not available; skipping");
        return;
    };
    let text = String::from_utf8_lossy(&out.stdout);
    let objdump: BTreeSet<u32> = text
        .lines()
        .filter_map(|l| {
            let (addr, rest) = l.trim_start().split_once(":\t")?;
            // Continuation lines of long encodings carry bytes only.
            rest.contains('\t').then(|| u32::from_str_radix(addr, 16).ok()).flatten()
        })
        .collect();
    assert!(objdump.len() > 50);

    let img = load_elf(sample()).unwrap();
    let sweep = linear_sweep_ground_truth(&img).unwrap();
    let ours: BTreeSet<u32> = sweep.offsets().iter().map(|&o| img.offset_to_vaddr(o).unwrap()).collect();
    assert_eq!(ours, objdump);

    let superset = superset_image(&img, 1);
    for o in sweep.offsets() {
        assert!(superset.get(o).is_some(), "offset {o} missing from the superset");
    }
}

#[test]
fn dwarf_blocks_and_brel() {
    let img = load_elf(sample()).unwrap();
    let raw = ext_blk_bnd_dwarf(&img).unwrap();
    // board_size, komi, rules in .data; counter in .bss.
    assert_eq!(raw.boundaries.global[&GlobalRegion::Data], [0, 4, 8].into());
    assert_eq!(raw.boundaries.global[&GlobalRegion::Bss], [0].into());
    // user_f is the argument above the return address, i the first local
    // below the saved ebp.
    assert_eq!(raw.boundaries.stack["discard_moves"], [-8, 4].into());
    // arr[4] at ebp-0x10, buf[10] at ebp-0x1a.
    assert_eq!(raw.boundaries.stack["main"], [-30, -20].into());

    let sweep = linear_sweep_ground_truth(&img).unwrap();
    let entries = function_entry_offsets(&img).unwrap();
    let funcs = build_cfg(&img, &sweep.true_instrs(), &entries).unwrap();
    let res = vsa_all(&funcs, &img.regions, &VsaConfig::default()).unwrap();
    let brel = id_instr_touch_mem(&funcs, &res, &raw.boundaries, &img.regions, 16);
    let got: BTreeSet<u32> = brel["discard_moves"].iter().map(|&o| img.offset_to_vaddr(o).unwrap()).collect();
    let expected: BTreeSet<u32> = [
        0x4010f4, 0x4010f7, 0x4010fe, 0x401108, 0x40110b, 0x401112, 0x40111b, 0x401129, 0x40112f, 0x401132, 0x401138,
        0x401145,
    ]
    .into();
    assert_eq!(got, expected);
}
