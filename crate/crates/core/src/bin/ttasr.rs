//! Command-line entry point: pretraining, streaming fine-tuning, greedy
//! decoding, WER evaluation and attention-mask inspection.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use ttasr::config::RunConfig;
use ttasr::eval::{evaluate, Decoder, Vocab};
use ttasr::frontend::{filter_long, load_manifest, load_utterance, make_batches, Batch, BatchOrigin};
use ttasr::masking::chunk_attention_mask;
use ttasr::trainer::{
    finetune_step, load_checkpoint, pretrain_step, save_checkpoint, validation_loss,
    AlternatingSampler, LabeledSampler, LossWeights, StepMode, TrainState,
};
use ttasr::{Error, Result};

#[derive(Parser)]
#[command(name = "ttasr", about = "Streaming transducer ASR with multitask pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multitask pretraining on alternating labeled/unlabeled batches.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Directory that manifest-relative paths resolve against.
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        steps: usize,
        /// Checkpoint written when the run finishes.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics JSONL file (defaults to stdout).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Streaming fine-tuning with the transducer loss only.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Initialize parameters from a pretraining checkpoint (step counter
        /// and optimizer state start fresh).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Greedy-decode a manifest; prints one "id<TAB>text" line per utterance.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Decode under the streaming attention mask instead of full context.
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long, default_value_t = 1)]
        left_chunks: usize,
        #[arg(long, default_value_t = 4)]
        max_symbols_per_frame: usize,
    },
    /// Score WER on one or more labeled manifests; prints a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Repeatable; NAME=PATH or plain PATH (name from file stem).
        #[arg(long, required = true)]
        manifest: Vec<String>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long, default_value_t = 1)]
        left_chunks: usize,
        #[arg(long, default_value_t = 4)]
        max_symbols_per_frame: usize,
    },
    /// Print the chunk-wise streaming attention mask as 0/1 rows.
    MaskDump {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        chunk: usize,
        #[arg(long, default_value_t = 1)]
        left_chunks: usize,
    },
}

fn resolve(path: &Path, data_dir: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        data_dir.join(path)
    }
}

fn load_batches(
    manifest: &Path,
    data_dir: &Path,
    vocab_size: usize,
    cap: usize,
    origin: BatchOrigin,
    seed: u64,
) -> Result<Vec<Batch>> {
    let entries = load_manifest(&resolve(manifest, data_dir), vocab_size)?;
    let utts = entries
        .iter()
        .map(|e| load_utterance(e, data_dir))
        .collect::<Result<Vec<_>>>()?;
    make_batches(&filter_long(utts), cap, origin, seed)
}

fn metrics_writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout()),
    })
}

fn log_validation(
    w: &mut dyn Write,
    state: &TrainState,
    batches: &[Batch],
    mode: StepMode,
) -> Result<()> {
    let loss = validation_loss(state, batches, mode)?;
    writeln!(
        w,
        "{}",
        serde_json::json!({"step": state.step, "valid_loss": loss})
    )?;
    Ok(())
}

fn run_pretrain(
    config: &Path,
    data_dir: &Path,
    steps: usize,
    out: &Path,
    resume: Option<&Path>,
    metrics: &Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let vocab_size = cfg.model.transducer.vocab_size;
    let labeled_manifest = cfg
        .labeled_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("pretrain needs labeled_manifest".into()))?;
    let unlabeled_manifest = cfg
        .unlabeled_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("pretrain needs unlabeled_manifest".into()))?;
    let labeled = load_batches(
        labeled_manifest,
        data_dir,
        vocab_size,
        cfg.batch_cap,
        BatchOrigin::Labeled,
        cfg.seed,
    )?;
    let unlabeled = load_batches(
        unlabeled_manifest,
        data_dir,
        vocab_size,
        cfg.batch_cap,
        BatchOrigin::Unlabeled,
        cfg.seed.wrapping_add(1),
    )?;
    let sampler = AlternatingSampler::new(labeled, unlabeled, cfg.seed)?;
    let valid = match &cfg.valid_manifest {
        Some(p) => Some(load_batches(
            p,
            data_dir,
            vocab_size,
            cfg.batch_cap,
            BatchOrigin::Labeled,
            cfg.seed.wrapping_add(2),
        )?),
        None => None,
    };
    let mut state = match resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::new(
            cfg.model.clone(),
            cfg.schedule.clone(),
            LossWeights::new(cfg.alpha)?,
            cfg.seed,
        )?,
    };
    let mut w = metrics_writer(metrics)?;
    while state.step < steps {
        let batch = sampler.batch_at(state.step);
        let m = pretrain_step(&mut state, batch)?;
        if m.step % cfg.log_every == 0 {
            writeln!(w, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
        }
        if let Some(valid) = &valid {
            if cfg.validate_every > 0 && m.step % cfg.validate_every == 0 {
                log_validation(&mut w, &state, valid, StepMode::Pretrain { alpha: cfg.alpha })?;
            }
        }
    }
    save_checkpoint(&state, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_finetune(
    config: &Path,
    data_dir: &Path,
    steps: usize,
    out: &Path,
    init: Option<&Path>,
    resume: Option<&Path>,
    metrics: &Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let vocab_size = cfg.model.transducer.vocab_size;
    let labeled_manifest = cfg
        .labeled_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("finetune needs labeled_manifest".into()))?;
    let labeled = load_batches(
        labeled_manifest,
        data_dir,
        vocab_size,
        cfg.batch_cap,
        BatchOrigin::Labeled,
        cfg.seed,
    )?;
    let sampler = LabeledSampler::new(labeled, cfg.seed)?;
    let valid = match &cfg.valid_manifest {
        Some(p) => Some(load_batches(
            p,
            data_dir,
            vocab_size,
            cfg.batch_cap,
            BatchOrigin::Labeled,
            cfg.seed.wrapping_add(2),
        )?),
        None => None,
    };
    let mut state = match (resume, init) {
        (Some(p), _) => load_checkpoint(p)?,
        (None, Some(p)) => {
            load_checkpoint(p)?.for_finetuning(cfg.schedule.clone(), cfg.seed)?
        }
        (None, None) => TrainState::new(
            cfg.model.clone(),
            cfg.schedule.clone(),
            LossWeights::new(cfg.alpha)?,
            cfg.seed,
        )?,
    };
    let mut w = metrics_writer(metrics)?;
    while state.step < steps {
        let batch = sampler.batch_at(state.step);
        let m = finetune_step(&mut state, batch, cfg.chunk_size, cfg.left_chunks)?;
        if m.step % cfg.log_every == 0 {
            writeln!(w, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
        }
        if let Some(valid) = &valid {
            if cfg.validate_every > 0 && m.step % cfg.validate_every == 0 {
                log_validation(
                    &mut w,
                    &state,
                    valid,
                    StepMode::Finetune {
                        chunk_size: cfg.chunk_size,
                        left_chunks: cfg.left_chunks,
                    },
                )?;
            }
        }
    }
    save_checkpoint(&state, out)?;
    Ok(())
}

fn run_decode(
    checkpoint: &Path,
    manifest: &Path,
    data_dir: &Path,
    chunk_size: Option<usize>,
    left_chunks: usize,
    max_symbols_per_frame: usize,
) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let vocab = Vocab::toy();
    let decoder = Decoder {
        params: &state.params,
        model: &state.model,
        chunk: chunk_size.map(|c| (c, left_chunks)),
        max_symbols_per_frame,
    };
    let entries = load_manifest(manifest, state.model.transducer.vocab_size)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for entry in &entries {
        let utt = load_utterance(entry, data_dir)?;
        let hyp = decoder.decode_features(&utt.features)?;
        writeln!(out, "{}\t{}", entry.id, vocab.detokenize(&hyp)?)?;
    }
    Ok(())
}

fn run_eval(
    checkpoint: &Path,
    manifests: &[String],
    data_dir: &Path,
    chunk_size: Option<usize>,
    left_chunks: usize,
    max_symbols_per_frame: usize,
) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let vocab = Vocab::toy();
    let decoder = Decoder {
        params: &state.params,
        model: &state.model,
        chunk: chunk_size.map(|c| (c, left_chunks)),
        max_symbols_per_frame,
    };
    let mut sets = Vec::new();
    for spec in manifests {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| spec.clone());
                (name, p)
            }
        };
        let entries = load_manifest(&path, state.model.transducer.vocab_size)?;
        sets.push((name, entries));
    }
    let report = evaluate(&decoder, &sets, data_dir, &vocab)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serialize")
    );
    Ok(())
}

fn run_mask_dump(frames: usize, chunk: usize, left_chunks: usize) -> Result<()> {
    let mask = chunk_attention_mask(frames, chunk, left_chunks)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for t in 0..frames {
        let row: String = (0..frames)
            .map(|tau| if mask.is_visible(t, tau) { '1' } else { '0' })
            .collect();
        writeln!(out, "{row}")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            data_dir,
            steps,
            out,
            resume,
            metrics,
        } => run_pretrain(&config, &data_dir, steps, &out, resume.as_deref(), &metrics),
        Command::Finetune {
            config,
            data_dir,
            steps,
            out,
            init,
            resume,
            metrics,
        } => run_finetune(
            &config,
            &data_dir,
            steps,
            &out,
            init.as_deref(),
            resume.as_deref(),
            &metrics,
        ),
        Command::Decode {
            checkpoint,
            manifest,
            data_dir,
            chunk_size,
            left_chunks,
            max_symbols_per_frame,
        } => run_decode(
            &checkpoint,
            &manifest,
            &data_dir,
            chunk_size,
            left_chunks,
            max_symbols_per_frame,
        ),
        Command::Eval {
            checkpoint,
            manifest,
            data_dir,
            chunk_size,
            left_chunks,
            max_symbols_per_frame,
        } => run_eval(
            &checkpoint,
            &manifest,
            &data_dir,
            chunk_size,
            left_chunks,
            max_symbols_per_frame,
        ),
        Command::MaskDump {
            frames,
            chunk,
            left_chunks,
        } => run_mask_dump(frames, chunk, left_chunks),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
