//! Property tests for the laws the pipeline relies on.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use supdis::dataset::{build_sequences, dedup_sequences, task_stream, DatasetConfig, Label, Origin, Task, TokenSequence};
use supdis::eval::{aict, prf1, recall_rc, CallTargets, Truth, Verdict};
use supdis::fixture::asm::{Alu, Asm, Mem};
use supdis::groundtruth::{normalize_frame_offset, scan_prologue};
use supdis::loader::dwarf::FrameBase;
use supdis::loader::RegionTable;
use supdis::model::{
    classify, embed, encoder_forward, focal_term, padding_mask, tiny_config, LossConfig, ModelParameters,
};
use supdis::superset::{decode_at, superset_disassemble, superset_disassemble_parallel, Reg, TokenVocab};
use supdis::vsa::{func_wise_vsa, function_cfg, AbsBase, AbsValue, VsaConfig};

fn sweep(code: &[u8]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut at = 0;
    while let Ok(ins) = decode_at(code, at) {
        out.push(at);
        at += ins.length as usize;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn superset_covers_every_offset(code in prop::collection::vec(any::<u8>(), 0..=4096)) {
        let listing = superset_disassemble(&code);
        let decoded: BTreeSet<usize> = listing.instrs.iter().map(|i| i.offset).collect();
        let failed: BTreeSet<usize> = listing.failures.iter().copied().collect();
        prop_assert!(decoded.is_disjoint(&failed));
        prop_assert_eq!(decoded.len() + failed.len(), code.len());
        for at in sweep(&code) {
            prop_assert!(decoded.contains(&at));
        }
        for ins in &listing.instrs {
            prop_assert!((1..=15).contains(&(ins.length as usize)));
            prop_assert!(ins.offset + (ins.length as usize) <= code.len());
            // Decoding only looks at the instruction's own bytes.
            prop_assert_eq!(&decode_at(&code[..ins.offset + (ins.length as usize)], ins.offset).unwrap(), ins);
        }
    }

    #[test]
    fn sequence_count_is_ceiling(code in prop::collection::vec(any::<u8>(), 1..=1024), l in 2usize..64, t3 in any::<bool>()) {
        let task = if t3 { Task::T3 } else { Task::T1 };
        let listing = superset_disassemble(&code);
        let cfg = DatasetConfig { seq_len: l, task, vocab: TokenVocab::default() };
        let seqs = build_sequences(&listing, &cfg, &RegionTable::default(), "b");
        let stream: Vec<usize> = task_stream(&listing, task).iter().map(|i| i.offset).collect();
        prop_assert_eq!(seqs.len(), stream.len().div_ceil(l));
        let flat: Vec<usize> = seqs.iter().flat_map(|s| s.offsets.iter().flatten().copied()).collect();
        prop_assert_eq!(flat, stream);
        for s in &seqs {
            prop_assert_eq!(s.len(), l);
            prop_assert!(s.fields.iter().all(|f| f.len() == l));
        }
    }

    #[test]
    fn dedup_is_idempotent(picks in prop::collection::vec((0usize..6, 0usize..3), 0..40)) {
        let seqs: Vec<TokenSequence> = picks.iter().map(|&(a, b)| toy_seq(a, b)).collect();
        let once = dedup_sequences(seqs.clone());
        prop_assert_eq!(&dedup_sequences(once.clone()), &once);
        let distinct: BTreeSet<(usize, bool)> = picks.iter().map(|&(a, b)| (a, b == 1)).collect();
        prop_assert_eq!(once.len(), distinct.len());
    }

    #[test]
    fn focal_is_nonnegative_and_decreasing(p in 1e-9f64..1.0, q in 1e-9f64..1.0, alpha in 0.01f64..0.99, gamma in 0.0f64..5.0, pos in any::<bool>()) {
        let lc = LossConfig { alpha, gamma };
        let label = if pos { Label::Pos } else { Label::Neg };
        let (lo, hi) = if p < q { (p, q) } else { (q, p) };
        let a = focal_term(lo, label, &lc);
        let b = focal_term(hi, label, &lc);
        prop_assert!(a >= 0.0 && b >= 0.0);
        prop_assert!(a >= b);
        let a_t = if pos { alpha } else { 1.0 - alpha };
        let ce = -a_t * lo.ln();
        let ce_lc = LossConfig { alpha, gamma: 0.0 };
        prop_assert!((focal_term(lo, label, &ce_lc) - ce).abs() <= 1e-12 * ce.max(1.0));
    }

    #[test]
    fn recall_is_a_fraction(observed in call_targets(), predicted in call_targets()) {
        prop_assume!(observed.values().any(|s| !s.is_empty()));
        let rc = recall_rc(&predicted, &observed).unwrap();
        prop_assert!((0.0..=1.0).contains(&rc));
        prop_assert_eq!(recall_rc(&observed, &observed).unwrap(), 1.0);
    }

    #[test]
    fn aict_is_mean_set_size(predicted in call_targets()) {
        prop_assume!(!predicted.is_empty());
        let total: usize = predicted.values().map(|s| s.len()).sum();
        prop_assert_eq!(aict(&predicted).unwrap(), total as f64 / predicted.len() as f64);
    }

    #[test]
    fn prf1_ignores_order(v in prop::collection::vec((any::<bool>(), 0u8..4), 0..60), seed in any::<u64>()) {
        let verdicts: Vec<Verdict> = v
            .iter()
            .enumerate()
            .map(|(i, &(predicted, t))| Verdict {
                offset: i,
                predicted,
                truth: [Truth::Pos, Truth::Neg, Truth::Pad, Truth::Unknown][t as usize],
            })
            .collect();
        let mut shuffled = verdicts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        prop_assert_eq!(prf1(&verdicts), prf1(&shuffled));
    }

    #[test]
    fn frame_offsets_agree_with_value_tracking(pushes in 0usize..4, frame in 0i32..64, disp in -64i32..64) {
        let saved = [Reg::Ebx, Reg::Esi, Reg::Edi];
        let mut a = Asm::new();
        for &r in &saved[..pushes.min(3)] {
            a.push_r(r);
        }
        a.push_r(Reg::Ebp);
        a.mov_rr(Reg::Ebp, Reg::Esp);
        a.alu_ri(Alu::Sub, Reg::Esp, frame * 4);
        a.mov_mr(Mem::base(Reg::Ebp, disp * 4), Reg::Eax);
        a.mov_mr(Mem::base(Reg::Esp, disp.abs() * 4), Reg::Eax);
        a.leave();
        a.ret();
        let code = a.finish();
        let instrs = supdis_decode(&code);
        let probe = instrs[instrs.len() - 4].offset;
        let f = function_cfg("f".into(), 0, instrs.clone());
        let res = func_wise_vsa(&f, &RegionTable::default(), &BTreeMap::new(), &VsaConfig::default()).unwrap();
        let state = &res.states[&probe];
        let stack = |v: &AbsValue| {
            let s = v.stack_offsets().unwrap();
            assert_eq!(s.len(), 1);
            s[0]
        };
        let info = scan_prologue("f", &instrs);
        let ebp = stack(state.reg(Reg::Ebp));
        let esp = stack(state.reg(Reg::Esp));
        prop_assert_eq!(normalize_frame_offset(FrameBase::Ebp, disp as i64 * 4, &info), Some(ebp + disp as i64 * 4));
        prop_assert_eq!(normalize_frame_offset(FrameBase::Esp, disp.abs() as i64 * 4, &info), Some(esp + disp.abs() as i64 * 4));
        prop_assert!(matches!(state.reg(Reg::Ebp), AbsValue::Set(s) if s.iter().all(|l| l.base == AbsBase::StackInit)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn parallel_superset_matches_serial(code in prop::collection::vec(any::<u8>(), 4096..=12288), workers in 2usize..5) {
        prop_assert_eq!(superset_disassemble_parallel(&code, workers), superset_disassemble(&code));
    }

    #[test]
    fn model_file_roundtrips(seed in any::<u64>(), t3 in any::<bool>()) {
        let mut cfg = tiny_config(if t3 { Task::T3 } else { Task::T1 });
        cfg.seed = seed;
        let p = ModelParameters::init(&cfg).unwrap();
        let back = ModelParameters::from_bytes(&p.to_bytes()).unwrap();
        prop_assert_eq!(back.config, p.config);
        prop_assert_eq!(back.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), p.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn padded_positions_do_not_change_logits(seed in any::<u64>(), real in 1usize..8, t3 in any::<bool>()) {
        let mut cfg = tiny_config(if t3 { Task::T3 } else { Task::T1 });
        cfg.seed = seed;
        let mut p = ModelParameters::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        let v = &cfg.vocab;
        let l = cfg.seq_len;
        let fields = cfg.fields();
        let draw = |rng: &mut ChaCha8Rng, f| v.global(f, rng.gen_range(0..v.field_size(f) as u16));
        let seq = TokenSequence {
            task: cfg.task,
            origin: Origin { binary: "r".into(), first_offset: 0 },
            fields: fields.iter().map(|&f| (0..l).map(|i| if i < real { draw(&mut rng, f) } else { v.pad }).collect()).collect(),
            labels: (0..l).map(|i| if i < real { Label::Neg } else { Label::Pad }).collect(),
            offsets: (0..l).map(|i| (i < real).then_some(i)).collect(),
        };
        let mut noisy = seq.clone();
        for (k, &f) in fields.iter().enumerate() {
            for i in real..l {
                noisy.fields[k][i] = draw(&mut rng, f);
            }
        }
        let run = |s: &TokenSequence| classify(&encoder_forward(&embed(s, &p).unwrap(), &padding_mask(s), &p), &p);
        let (a, b) = (run(&seq), run(&noisy));
        for i in 0..real {
            for c in 0..2 {
                prop_assert!((a[i][c] - b[i][c]).abs() <= 1e-9);
            }
        }
    }
}

fn supdis_decode(code: &[u8]) -> Vec<supdis::superset::DecodedInstr> {
    sweep(code).into_iter().map(|at| decode_at(code, at).unwrap()).collect()
}

fn toy_seq(a: usize, b: usize) -> TokenSequence {
    TokenSequence {
        task: Task::T1,
        origin: Origin { binary: format!("b{b}"), first_offset: a },
        fields: vec![vec![a as u32, 1], vec![2, 3], vec![4, 5]],
        labels: vec![if b == 1 { Label::Pos } else { Label::Neg }, Label::Pad],
        offsets: vec![Some(a), None],
    }
}

fn call_targets() -> impl Strategy<Value = CallTargets> {
    prop::collection::btree_map(0u64..40, prop::collection::btree_set(0u64..20, 0..6), 0..12)
}
