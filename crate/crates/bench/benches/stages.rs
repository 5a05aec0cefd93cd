use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use supdis::model::{loss_and_grad, predict_sequences, tiny_config, LossConfig, ModelConfig, ModelParameters};
use supdis::superset::{decode2, superset_disassemble, superset_image, TokenVocab};
use supdis::vsa::{build_cfg, vsa_all, VsaConfig};
use supdis::{linear_sweep_ground_truth, Task, TokenSequence};
use supdis_bench::{corpus_image, random_code, t1_sequences};

fn superset(c: &mut Criterion) {
    let mut g = c.benchmark_group("superset");
    for len in [4096, 65536] {
        let code = random_code(len, 1);
        g.throughput(Throughput::Bytes(len as u64));
        g.bench_with_input(BenchmarkId::new("disassemble", len), &code, |b, code| {
            b.iter(|| superset_disassemble(black_box(code)))
        });
    }
    g.finish();
}

fn decode(c: &mut Criterion) {
    let img = corpus_image(16);
    let listing = superset_image(&img, 1);
    let range = TokenVocab::default().disp_range;
    c.bench_function("decode2/corpus_listing", |b| {
        b.iter(|| listing.instrs.iter().filter_map(|i| decode2(i, &img.regions, range)).count())
    });
}

fn value_sets(c: &mut Criterion) {
    let img = corpus_image(16);
    let sweep = linear_sweep_ground_truth(&img).unwrap();
    let entries = supdis::function_entry_offsets(&img).unwrap();
    let funcs = build_cfg(&img, &sweep.true_instrs(), &entries).unwrap();
    let cfg = VsaConfig::default();
    c.bench_function("vsa/16_functions", |b| b.iter(|| vsa_all(black_box(&funcs), &img.regions, &cfg).unwrap()));
}

fn model(c: &mut Criterion) {
    let img = corpus_image(4);
    let lc = LossConfig::default();
    let mut g = c.benchmark_group("model");
    g.sample_size(10);

    let tiny = tiny_config(Task::T1);
    let seqs = t1_sequences(&img, tiny.seq_len);
    let p = ModelParameters::init(&tiny).unwrap();
    let batch: Vec<&TokenSequence> = seqs.iter().take(8).collect();
    g.bench_function("loss_and_grad/tiny_batch8", |b| b.iter(|| loss_and_grad(&p, &batch, &lc).unwrap()));

    let full = ModelConfig::new(Task::T1, TokenVocab::default());
    let seqs = t1_sequences(&img, full.seq_len);
    let p = ModelParameters::init(&full).unwrap();
    let one: Vec<&TokenSequence> = seqs.iter().take(1).collect();
    g.bench_function("loss_and_grad/default_seq1", |b| b.iter(|| loss_and_grad(&p, &one, &lc).unwrap()));
    g.bench_function("predict/default_seq1", |b| b.iter(|| predict_sequences(&seqs[..1], &p, 0.5).unwrap()));
    g.finish();
}

criterion_group!(benches, superset, decode, value_sets, model);
criterion_main!(benches);
