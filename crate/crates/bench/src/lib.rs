//! Inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supdis::dataset::{build_sequences, label_sequences, DatasetConfig, GroundTruth, Task, TokenSequence};
use supdis::fixture::{generate_corpus, CorpusConfig};
use supdis::groundtruth::linear_sweep_ground_truth;
use supdis::loader::{function_entry_offsets, load_elf_bytes, BinaryImage};

pub fn random_code(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen()).collect()
}

/// One generated binary with `functions` functions.
pub fn corpus_image(functions: usize) -> BinaryImage {
    let b = generate_corpus(&CorpusConfig { binaries: 1, functions, seed: 1 }).remove(0);
    load_elf_bytes(&b.name, &b.elf).unwrap()
}

/// Entry-labeled sequences of `img` at sequence length `seq_len`.
pub fn t1_sequences(img: &BinaryImage, seq_len: usize) -> Vec<TokenSequence> {
    let listing = supdis::superset_image(img, 1);
    let sweep = linear_sweep_ground_truth(img).unwrap();
    let gt = GroundTruth {
        entries: Some(function_entry_offsets(img).unwrap()),
        instrs: Some(sweep.truth()),
        brel: None,
        pad: sweep.pad.clone(),
    };
    let dc = DatasetConfig { seq_len, ..DatasetConfig::new(Task::T1) };
    label_sequences(build_sequences(&listing, &dc, &img.regions, "bench"), &gt, Task::T1).unwrap()
}
