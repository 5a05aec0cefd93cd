use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;
use supdis::dataset::{build_sequences, dedup_sequences, label_sequences, DatasetConfig, GroundTruth, TokenSequence};
use supdis::eval::{
    boundary_prf1, prf1, BoundaryMetrics, BoundaryReport, EvalReport, MetricReport, TaskMetrics, Truth, Verdict,
};
use supdis::fixture::{discard_moves, generate_corpus, CorpusConfig};
use supdis::groundtruth::{ext_blk_bnd_dwarf, linear_sweep_ground_truth};
use supdis::loader::{function_entry_ground_truth, function_entry_offsets, BinaryImage};
use supdis::model::{
    predict_sequences, train, LossConfig, ModelConfig, ModelParameters, Prediction, TrainConfig, TrainReport,
};
use supdis::superset::{decode1, decode2, superset_image, DecodedInstr, MemOperand, SupersetListing, TokenVocab};
use supdis::vsa::{build_cfg, get_mem_blocks_from_disa, id_instr_touch_mem, vsa_all, FunctionCfg, VsaResult};
use supdis::Task;

use crate::artifact::*;
use crate::config::PipelineConfig;
use crate::error::CliError;

pub struct Ctx {
    pub cfg: PipelineConfig,
    /// `--task`, when given.
    pub task: Option<Task>,
}

#[derive(Serialize)]
struct SupersetRecord<'a> {
    offset: usize,
    vaddr: String,
    length: u8,
    text: String,
    /// Global token ids of opcode, ModRM and SIB.
    triple: [u32; 3],
    /// Adds displacement and region ids; memory-access and branch only.
    #[serde(skip_serializing_if = "Option::is_none")]
    quintuple: Option<[u32; 5]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mem_operand: Option<&'a MemOperand>,
    is_mem_access: bool,
    is_branch: bool,
}

#[derive(Serialize)]
struct SupersetSummary {
    schema_version: u32,
    kind: &'static str,
    #[serde(flatten)]
    id: BinaryId,
    vocab_hash: String,
    instructions: usize,
    failures: Vec<usize>,
}

#[derive(Serialize)]
struct SupersetTrailer {
    summary: SupersetSummary,
}

#[derive(Serialize)]
struct TrainLog<'a> {
    schema_version: u32,
    kind: &'static str,
    task: Task,
    vocab_hash: String,
    dataset_sha256: String,
    model: &'a ModelConfig,
    loss: LossConfig,
    train: TrainConfig,
    report: &'a TrainReport,
}

impl Ctx {
    fn vaddr(img: &BinaryImage, offset: usize) -> String {
        hex(img.offset_to_vaddr(offset).expect("code offsets map to addresses"))
    }

    fn hex_set(img: &BinaryImage, offsets: impl IntoIterator<Item = usize>) -> Vec<String> {
        offsets.into_iter().map(|o| Self::vaddr(img, o)).collect()
    }

    fn task_or(&self, found: Task, what: &Path) -> Result<Task, CliError> {
        match self.task {
            Some(t) if t != found => {
                Err(CliError::schema(format!("{}: task {found}, but --task {t} was given", what.display())))
            }
            _ => Ok(found),
        }
    }

    pub fn superset(&self, bin: &Path, out: &Path) -> Result<(), CliError> {
        let b = load_binary(bin)?;
        let listing = superset_image(&b.img, self.cfg.workers);
        let v = self.cfg.vocab();
        let records: Vec<SupersetRecord> = listing
            .instrs
            .iter()
            .map(|ins| SupersetRecord {
                offset: ins.offset,
                vaddr: Self::vaddr(&b.img, ins.offset),
                length: ins.length,
                text: ins.to_string(),
                triple: v.triple(decode1(ins)),
                quintuple: decode2(ins, &b.img.regions, v.disp_range).map(|q| v.quintuple(q)),
                mem_operand: ins.mem_operand.as_ref(),
                is_mem_access: ins.is_mem_access,
                is_branch: ins.is_branch,
            })
            .collect();
        let summary = SupersetSummary {
            schema_version: SCHEMA_VERSION,
            kind: "superset",
            id: b.id,
            vocab_hash: v.hash(),
            instructions: records.len(),
            failures: listing.failures.clone(),
        };
        // The summary trails the records.
        let mut text = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut text, r).expect("record serializes");
            text.push(b'\n');
        }
        serde_json::to_writer(&mut text, &SupersetTrailer { summary }).expect("summary serializes");
        text.push(b'\n');
        write_bytes(out, &text)
    }

    /// gt-entries, gt-instrs and gt-brel.
    pub fn gt_labels(&self, task: Task, bin: &Path, blocks: Option<&Path>, out: &Path) -> Result<(), CliError> {
        let b = load_binary(bin)?;
        let img = &b.img;
        let sweep = linear_sweep_ground_truth(img);
        let pad = sweep.as_ref().map(|s| s.pad.clone()).unwrap_or_default();
        let mut functions = None;
        let addresses = match task {
            Task::T1 => function_entry_ground_truth(img)?.into_iter().map(hex).collect(),
            Task::T2 => Self::hex_set(img, sweep?.truth()),
            Task::T3 => {
                let boundaries = match blocks {
                    Some(p) => {
                        let f = BlocksFile::load(p)?;
                        check_kind(p, &f.kind, "blocks_gt")?;
                        f.id.check(p, &b.id)?;
                        f.blocks
                    }
                    None => ext_blk_bnd_dwarf(img)?.boundaries,
                };
                let sweep = sweep?;
                let funcs = build_cfg(img, &sweep.true_instrs(), &function_entry_offsets(img)?)?;
                let res = vsa_all(&funcs, &img.regions, &self.cfg.vsa())?;
                let brel = id_instr_touch_mem(&funcs, &res, &boundaries, &img.regions, self.cfg.vsa.k);
                let all: BTreeSet<usize> = brel.values().flatten().copied().collect();
                functions = Some(brel);
                Self::hex_set(img, all)
            }
        };
        let file = LabelFile {
            schema_version: SCHEMA_VERSION,
            kind: label_kind(task).to_string(),
            id: b.id.clone(),
            addresses,
            pad: Self::hex_set(img, pad),
            functions,
        };
        write_json(out, &file)
    }

    pub fn gt_blocks(&self, bin: &Path, out: &Path) -> Result<(), CliError> {
        let b = load_binary(bin)?;
        let raw = ext_blk_bnd_dwarf(&b.img)?;
        let file = BlocksFile {
            schema_version: SCHEMA_VERSION,
            kind: "blocks_gt".into(),
            id: b.id,
            rendered: raw.boundaries.render(),
            blocks: raw.boundaries,
            derivations: Vec::new(),
            skipped: raw.skipped,
        };
        write_json(out, &file)
    }

    pub fn dataset(&self, bins: &[std::path::PathBuf], gts: &[std::path::PathBuf], out: &Path) -> Result<(), CliError> {
        if bins.len() != gts.len() {
            return Err(CliError::new("Usage", format!("{} --bin but {} --gt", bins.len(), gts.len())));
        }
        let mut task = self.task;
        let vocab = self.cfg.vocab();
        let mut seqs = Vec::new();
        let mut ids = Vec::new();
        for (bin, gt) in bins.iter().zip(gts) {
            let b = load_binary(bin)?;
            let labels = LabelFile::load(gt)?;
            labels.id.check(gt, &b.id)?;
            let lt = labels
                .task()
                .ok_or_else(|| CliError::schema(format!("{}: {:?} is not a label file", gt.display(), labels.kind)))?;
            let t = *task.get_or_insert(lt);
            if lt != t {
                return Err(CliError::schema(format!("{}: {} labels for a {t} dataset", gt.display(), labels.kind)));
            }
            let (pos, pad) = labels.offsets(&b.img)?;
            let listing = superset_image(&b.img, self.cfg.workers);
            let dc = DatasetConfig { seq_len: self.cfg.dataset.seq_len, task: t, vocab: vocab.clone() };
            let mut truth = GroundTruth { pad, ..GroundTruth::default() };
            match t {
                Task::T1 => truth.entries = Some(pos),
                Task::T2 => truth.instrs = Some(pos),
                Task::T3 => truth.brel = Some(pos),
            }
            let s = build_sequences(&listing, &dc, &b.img.regions, &b.id.binary);
            seqs.extend(label_sequences(s, &truth, t)?);
            ids.push(b.id);
        }
        let task = task.expect("at least one label file");
        let total = seqs.len();
        let seqs = dedup_sequences(seqs);
        let header = DatasetHeader {
            schema_version: SCHEMA_VERSION,
            kind: "dataset".into(),
            task,
            seq_len: self.cfg.dataset.seq_len,
            vocab_hash: vocab.hash(),
            binaries: ids,
            sequences: seqs.len(),
            duplicates: total - seqs.len(),
        };
        write_jsonl(out, &header, &seqs)?;
        write_json(&vocab_path(out), &VocabFile::new(vocab))
    }

    fn load_dataset(&self, data: &Path, vocab: Option<&Path>) -> Result<(DatasetHeader, Vec<TokenSequence>, TokenVocab), CliError> {
        let (header, seqs): (DatasetHeader, Vec<TokenSequence>) = read_jsonl(data)?;
        check_version(data, header.schema_version)?;
        check_kind(data, &header.kind, "dataset")?;
        self.task_or(header.task, data)?;
        if seqs.len() != header.sequences || seqs.iter().any(|s| s.task != header.task || s.len() != header.seq_len) {
            return Err(CliError::schema(format!("{}: sequences disagree with the header", data.display())));
        }
        let vpath = vocab.map_or_else(|| vocab_path(data), Path::to_path_buf);
        let v = VocabFile::load(&vpath)?;
        check_vocab(&data.display().to_string(), &v.vocab_hash, &header.vocab_hash)?;
        Ok((header, seqs, v.vocab))
    }

    pub fn train(&self, data: &Path, vocab: Option<&Path>, out: &Path) -> Result<(), CliError> {
        let (header, seqs, vocab) = self.load_dataset(data, vocab)?;
        let mc = self.cfg.model_config(header.task, header.seq_len, vocab);
        let lc = self.cfg.loss();
        let tc = self.cfg.train_config();
        let (params, report) = train(&seqs, &mc, &lc, &tc)?;
        write_bytes(out, &params.to_bytes())?;
        let log = TrainLog {
            schema_version: SCHEMA_VERSION,
            kind: "train",
            task: header.task,
            vocab_hash: header.vocab_hash,
            dataset_sha256: sha256_hex(&read_bytes(data)?),
            model: &mc,
            loss: lc,
            train: tc,
            report: &report,
        };
        write_json(&out.with_extension("train.json"), &log)
    }

    fn load_model(&self, path: &Path) -> Result<ModelParameters, CliError> {
        let params = ModelParameters::from_bytes(&read_bytes(path)?)?;
        self.task_or(params.config.task, path)?;
        Ok(params)
    }

    pub fn predict(&self, model: &Path, bin: &Path, vocab: Option<&Path>, out: &Path) -> Result<(), CliError> {
        let params = self.load_model(model)?;
        let cfg = &params.config;
        if let Some(vp) = vocab {
            check_vocab(&model.display().to_string(), &VocabFile::load(vp)?.vocab_hash, &cfg.vocab_hash())?;
        }
        let b = load_binary(bin)?;
        let listing = superset_image(&b.img, self.cfg.workers);
        let dc = DatasetConfig { seq_len: cfg.seq_len, task: cfg.task, vocab: cfg.vocab.clone() };
        let seqs = build_sequences(&listing, &dc, &b.img.regions, &b.id.binary);
        let preds = predict_parallel(&seqs, &params, self.cfg.threshold, self.cfg.workers)?;
        let records: Vec<PredRecord> = preds
            .into_iter()
            .map(|p| PredRecord { offset: p.offset, vaddr: Self::vaddr(&b.img, p.offset), p1: p.p1, verdict: p.verdict })
            .collect();
        let header = PredHeader {
            schema_version: SCHEMA_VERSION,
            kind: "pred".into(),
            task: cfg.task,
            id: b.id,
            vocab_hash: cfg.vocab_hash(),
            threshold: self.cfg.threshold,
        };
        write_jsonl(out, &header, &records)
    }

    /// Instruction offsets from a prediction file of `task` or a label file.
    fn offsets_from(&self, path: &Path, task: Task, b: &LoadedBinary) -> Result<BTreeSet<usize>, CliError> {
        let text = read_text(path)?;
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap_or(""))
            .map_err(|e| CliError::schema(format!("{}: {e}", path.display())))?;
        if first.get("kind").and_then(|k| k.as_str()) == Some("pred") {
            let p = PredFile::load(path)?;
            p.header.id.check(path, &b.id)?;
            if p.header.task != task {
                return Err(CliError::schema(format!("{}: {} predictions where {task} was expected", path.display(), p.header.task)));
            }
            return Ok(p.positives());
        }
        let l = LabelFile::load(path)?;
        check_kind(path, &l.kind, label_kind(task))?;
        l.id.check(path, &b.id)?;
        Ok(l.offsets(&b.img)?.0)
    }

    pub fn recover_blocks(
        &self,
        pred: &Path,
        bin: &Path,
        entries: Option<&Path>,
        instrs: Option<&Path>,
        out: &Path,
    ) -> Result<(), CliError> {
        let b = load_binary(bin)?;
        let p = PredFile::load(pred)?;
        p.header.id.check(pred, &b.id)?;
        if p.header.task != Task::T3 {
            return Err(CliError::schema(format!("{}: {} predictions, expected t3", pred.display(), p.header.task)));
        }
        let img = &b.img;
        let true_instrs: Vec<DecodedInstr> = match instrs {
            Some(path) => {
                let offs = self.offsets_from(path, Task::T2, &b)?;
                let listing: SupersetListing = superset_image(img, self.cfg.workers);
                offs.iter().filter_map(|&o| listing.get(o).cloned()).collect()
            }
            None => linear_sweep_ground_truth(img)?.true_instrs(),
        };
        let starts: BTreeSet<usize> = true_instrs.iter().map(|i| i.offset).collect();
        let entries = match entries {
            Some(path) => self.offsets_from(path, Task::T1, &b)?,
            None => function_entry_offsets(img)?,
        };
        // Predicted entries only count where an instruction was recovered.
        let entries: BTreeSet<usize> = entries.intersection(&starts).copied().collect();
        let (funcs, res) = self.analyze(img, &true_instrs, &entries)?;
        let mb = get_mem_blocks_from_disa(&funcs, &res, &p.positives(), &img.regions, self.cfg.vsa.k);
        let file = BlocksFile {
            schema_version: SCHEMA_VERSION,
            kind: "memblocks".into(),
            id: b.id,
            rendered: mb.blocks.render(),
            blocks: mb.blocks,
            derivations: mb.derivations,
            skipped: BTreeMap::new(),
        };
        write_json(out, &file)
    }

    fn analyze(
        &self,
        img: &BinaryImage,
        instrs: &[DecodedInstr],
        entries: &BTreeSet<usize>,
    ) -> Result<(Vec<FunctionCfg>, Vec<VsaResult>), CliError> {
        let funcs = build_cfg(img, instrs, entries)?;
        let res = vsa_all(&funcs, &img.regions, &self.cfg.vsa())?;
        Ok((funcs, res))
    }

    pub fn eval(
        &self,
        preds: &[std::path::PathBuf],
        gts: &[std::path::PathBuf],
        blocks: &[std::path::PathBuf],
        blocks_gt: &[std::path::PathBuf],
        out: &Path,
        csv: Option<&Path>,
    ) -> Result<(), CliError> {
        if preds.len() != gts.len() || blocks.len() != blocks_gt.len() {
            return Err(CliError::new("Usage", "--pred/--gt and --blocks/--blocks-gt must pair up"));
        }
        let mut vocab_hash: Option<String> = None;
        let mut tasks: BTreeMap<String, TaskMetrics> = BTreeMap::new();
        for (pp, gp) in preds.iter().zip(gts) {
            let p = PredFile::load(pp)?;
            let g = LabelFile::load(gp)?;
            g.id.check(gp, &p.header.id)?;
            check_kind(gp, &g.kind, label_kind(p.header.task))?;
            match &vocab_hash {
                Some(h) => check_vocab(&pp.display().to_string(), h, &p.header.vocab_hash)?,
                None => vocab_hash = Some(p.header.vocab_hash.clone()),
            }
            let set = |list: &[String]| -> Result<BTreeSet<u32>, CliError> { list.iter().map(|s| parse_hex(s)).collect() };
            let (pos, pad) = (set(&g.addresses)?, set(&g.pad)?);
            let verdicts = p
                .records
                .iter()
                .map(|r| {
                    let a = parse_hex(&r.vaddr)?;
                    let truth = if pad.contains(&a) {
                        Truth::Pad
                    } else if pos.contains(&a) {
                        Truth::Pos
                    } else {
                        Truth::Neg
                    };
                    Ok(Verdict { offset: a as usize, predicted: r.verdict, truth })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let m = tasks.entry(p.header.task.to_string()).or_default();
            if m.binaries.insert(p.header.id.binary.clone(), prf1(&verdicts)).is_some() {
                return Err(CliError::new("Usage", format!("{} predictions for {} given twice", p.header.task, p.header.id.binary)));
            }
        }
        for m in tasks.values_mut() {
            m.overall = MetricReport::merge(m.binaries.values());
        }
        let boundaries = if blocks.is_empty() {
            None
        } else {
            let mut bm = BoundaryMetrics::default();
            for (bp, gp) in blocks.iter().zip(blocks_gt) {
                let p = BlocksFile::load(bp)?;
                let g = BlocksFile::load(gp)?;
                check_kind(bp, &p.kind, "memblocks")?;
                check_kind(gp, &g.kind, "blocks_gt")?;
                g.id.check(gp, &p.id)?;
                bm.binaries.insert(p.id.binary.clone(), boundary_prf1(&p.blocks, &g.blocks));
            }
            let all: Vec<&BoundaryReport> = bm.binaries.values().collect();
            bm.overall = BoundaryReport {
                overall: MetricReport::merge(all.iter().map(|b| &b.overall)),
                global: MetricReport::merge(all.iter().map(|b| &b.global)),
                stack: MetricReport::merge(all.iter().map(|b| &b.stack)),
            };
            Some(bm)
        };
        let report = EvalReport {
            schema_version: SCHEMA_VERSION,
            vocab_hash: vocab_hash.unwrap_or_else(|| self.cfg.vocab().hash()),
            tasks,
            boundaries,
        };
        write_json(out, &report)?;
        if let Some(c) = csv {
            write_bytes(c, report.to_csv().as_bytes())?;
        }
        Ok(())
    }
}

/// Splits `seqs` over `workers` threads; results come back in sequence order.
fn predict_parallel(
    seqs: &[TokenSequence],
    params: &ModelParameters,
    threshold: f64,
    workers: usize,
) -> Result<Vec<Prediction>, CliError> {
    let workers = workers.clamp(1, seqs.len().max(1));
    if workers == 1 {
        return Ok(predict_sequences(seqs, params, threshold)?);
    }
    let chunk = seqs.len().div_ceil(workers);
    let parts: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> =
            seqs.chunks(chunk).map(|c| s.spawn(move || predict_sequences(c, params, threshold))).collect();
        handles.into_iter().map(|h| h.join().expect("prediction thread panicked")).collect()
    });
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn make_fixtures(dir: &Path, binaries: usize, functions: usize, seed: u64) -> Result<(), CliError> {
    write_bytes(&dir.join("discard_moves.elf"), &discard_moves())?;
    for b in generate_corpus(&CorpusConfig { binaries, functions, seed }) {
        write_bytes(&dir.join(format!("{}.elf", b.name)), &b.elf)?;
    }
    Ok(())
}
