use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use supdis::Task;

mod artifact;
mod commands;
mod config;
mod error;

use config::PipelineConfig;
use error::CliError;

/// Superset disassembly, ground truth, training and evaluation pipeline for
/// 32-bit x86 ELF binaries.
#[derive(Debug, Parser)]
#[command(name = "supdis", version)]
pub struct Cli {
    /// Pipeline configuration (TOML); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_task)]
    task: Option<Task>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output artifact.
    #[arg(short = 'o', long = "output", global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode an instruction at every code offset (superset.jsonl).
    Superset { bin: PathBuf },
    /// Function entries from the symbol table.
    GtEntries { bin: PathBuf },
    /// True instructions by linear sweep.
    GtInstrs { bin: PathBuf },
    /// Memory-block starts from DWARF variables (blocks_gt.json).
    GtBlocks { bin: PathBuf },
    /// Instructions that access a ground-truth block start (brel_gt.json).
    GtBrel {
        bin: PathBuf,
        /// Block ground truth from gt-blocks; read from DWARF when absent.
        #[arg(long)]
        blocks: Option<PathBuf>,
    },
    /// Labeled token sequences (dataset.jsonl plus vocab.json).
    Dataset(DatasetArgs),
    /// Train one task's classifier (model.bin plus <stem>.train.json).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary sidecar; defaults to vocab.json next to the dataset.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Per-instruction probabilities and verdicts (pred.jsonl).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bin: PathBuf,
        /// Check the model against this vocabulary sidecar.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Memory blocks from boundary-relevant predictions (memblocks.json).
    RecoverBlocks {
        /// T3 predictions.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        bin: PathBuf,
        /// Function entries: T1 predictions or gt-entries output. Defaults to
        /// the symbol table.
        #[arg(long)]
        entries: Option<PathBuf>,
        /// True instructions: T2 predictions or gt-instrs output. Defaults to
        /// linear sweep.
        #[arg(long)]
        instrs: Option<PathBuf>,
    },
    /// Score predictions and recovered blocks (report.json).
    Eval(EvalArgs),
    /// Write the example binaries and a generated corpus into a directory.
    MakeFixtures {
        #[arg(long, default_value_t = 2)]
        binaries: usize,
        #[arg(long, default_value_t = 6)]
        functions: usize,
    },
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Input binaries, paired in order with `--gt`.
    #[arg(long = "bin", required = true)]
    bins: Vec<PathBuf>,
    /// Label files from gt-entries (t1), gt-instrs (t2) or gt-brel (t3).
    #[arg(long = "gt", required = true)]
    gts: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction files, paired in order with `--gt`.
    #[arg(long = "pred")]
    preds: Vec<PathBuf>,
    #[arg(long = "gt")]
    gts: Vec<PathBuf>,
    /// recover-blocks outputs, paired in order with `--blocks-gt`.
    #[arg(long = "blocks")]
    blocks: Vec<PathBuf>,
    #[arg(long = "blocks-gt")]
    blocks_gt: Vec<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threshold {
        cfg.threshold = t;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    let out = || cli.output.clone().ok_or_else(|| CliError::new("Usage", "missing -o <output>"));
    let ctx = commands::Ctx { cfg, task: cli.task };
    match cli.command {
        Command::Superset { bin } => ctx.superset(&bin, &out()?),
        Command::GtEntries { bin } => ctx.gt_labels(Task::T1, &bin, None, &out()?),
        Command::GtInstrs { bin } => ctx.gt_labels(Task::T2, &bin, None, &out()?),
        Command::GtBlocks { bin } => ctx.gt_blocks(&bin, &out()?),
        Command::GtBrel { bin, blocks } => ctx.gt_labels(Task::T3, &bin, blocks.as_deref(), &out()?),
        Command::Dataset(a) => ctx.dataset(&a.bins, &a.gts, &out()?),
        Command::Train { data, vocab } => ctx.train(&data, vocab.as_deref(), &out()?),
        Command::Predict { model, bin, vocab } => ctx.predict(&model, &bin, vocab.as_deref(), &out()?),
        Command::RecoverBlocks { pred, bin, entries, instrs } => {
            ctx.recover_blocks(&pred, &bin, entries.as_deref(), instrs.as_deref(), &out()?)
        }
        Command::Eval(a) => ctx.eval(&a.preds, &a.gts, &a.blocks, &a.blocks_gt, &out()?, a.csv.as_deref()),
        Command::MakeFixtures { binaries, functions } => {
            commands::make_fixtures(&out()?, binaries, functions, cli.seed.unwrap_or(1))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", CliError::new("Usage", e.to_string().trim_end()).to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
