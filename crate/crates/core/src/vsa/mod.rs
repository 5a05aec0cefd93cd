//! Value-set analysis over recovered functions and the translations between
//! value sets and memory-block boundaries.

pub mod analysis;
pub mod cfg;
pub mod domain;
pub mod vtr;

use thiserror::Error;

pub use analysis::{callee_pops, cond_holds, func_wise_vsa, vsa_all, Transfer, VsaConfig, VsaResult};
pub use cfg::{build_cfg, function_cfg, BasicBlock, Edge, EdgeKind, FunctionCfg};
pub use domain::{AbsBase, AbsLoc, AbsState, AbsValue, Domain};
pub use vtr::{
    get_mem_blocks_from_disa, id_instr_touch_mem, render_set, BoundarySet, BrelSet, Derivation, MemBlockSet,
    MemBlocks, RegionRef,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VsaError {
    #[error("instruction at {offset} runs past the next function entry {next_entry}")]
    OverlappingFunctions { offset: usize, next_entry: usize },
    #[error("function entry {offset} is not an instruction start")]
    EntryNotInstruction { offset: usize },
    #[error("analysis of {function} did not converge after {visits} block visits")]
    NonTermination { function: String, visits: usize },
}

impl VsaError {
    pub fn kind(&self) -> &'static str {
        match self {
            VsaError::OverlappingFunctions { .. } => "OverlappingFunctions",
            VsaError::EntryNotInstruction { .. } => "EntryNotInstruction",
            VsaError::NonTermination { .. } => "NonTermination",
        }
    }
}
