//! Superset disassembly, instruction and memory-block ground truth, a
//! transformer token classifier, value-set analysis and evaluation metrics
//! for 32-bit x86 ELF binaries.

pub mod dataset;
pub mod eval;
pub mod fixture;
pub mod groundtruth;
pub mod loader;
pub mod model;
pub mod superset;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;
pub mod vsa;

pub use dataset::{
    build_sequences, dedup_sequences, label_sequences, DatasetConfig, DatasetError, GroundTruth, Label, Task,
    TokenSequence,
};
pub use eval::{
    aict, boundary_prf1, eval_incomplete, prf1, recall_rc, EvalError, EvalReport, MetricReport, Truth, Verdict,
};
pub use groundtruth::{ext_blk_bnd_dwarf, linear_sweep_ground_truth, GroundTruthError, RawBlockSet};
pub use loader::{
    function_entry_offsets, load_elf, load_elf_bytes, BinaryImage, GlobalRegion, LoadError, RegionTable,
};
pub use model::{
    predict, train, LossConfig, ModelConfig, ModelError, ModelParameters, Prediction, TrainConfig, TrainReport,
};
pub use superset::{
    decode1, decode2, superset_disassemble, superset_image, DecodedInstr, DispRange, Field, FieldQuintuple,
    FieldTriple, Reg, SupersetListing, TokenVocab,
};
pub use vsa::{
    build_cfg, func_wise_vsa, get_mem_blocks_from_disa, id_instr_touch_mem, vsa_all, AbsLoc, AbsState, AbsValue,
    BoundarySet, BrelSet, MemBlocks, VsaConfig, VsaResult,
};
