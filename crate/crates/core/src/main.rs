use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use psp::rng::RngState;
use psp::skeleton::{
    default_pyramid, load_dataset, make_split, save_dataset, synth_generate, tiny_pyramid, Batch, DatasetSplit,
    PyramidSpec, SkeletonSequence, SplitOptions, SynthOptions,
};
use psp::train::{
    dump_attention, dump_embeddings, dump_metrics, dump_predictions, evaluate, load_checkpoint, pipeline_gradcheck,
    run_training, save_checkpoint, split_from_config, DumpKind, EvalReport, GradcheckConfig, SplitData, TrainConfig, TrainState,
};

const PYRAMID_FILE: &str = "pyramid.json";
const SPLIT_FILE: &str = "split.json";
const METRICS_LOG: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "psp", version, about = "Semi-supervised skeleton action recognition with pyramid attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl and checkpoints under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split file; defaults to <data>/split.json, else one is drawn from the config.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Pyramid file; defaults to <data>/pyramid.json, else the built-in layout.
        #[arg(long)]
        pyramid: Option<PathBuf>,
        /// Continue from a checkpoint directory or manifest.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the split's test ids (or every labeled sequence).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Write a synthetic corpus of psp-json files plus pyramid.json.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        /// 25, 20 or 6 joints.
        #[arg(long, default_value_t = 25)]
        joints: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Draw a labeled/unlabeled/test split for a corpus.
    Split {
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Draw from all ids at once instead of per class.
        #[arg(long)]
        unstratified: bool,
        /// Output file; defaults to <data>/split.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient of the full objective.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export attention maps, embeddings, metrics or predictions from a checkpoint.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated: attention, embeddings, metrics, predictions.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sequences in the dumped batch.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            // Library errors already embed their source text.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train {
            config,
            data,
            out,
            split,
            pyramid,
            resume,
        } => train(&config, &data, &out, split, pyramid, resume),
        Command::Eval { checkpoint, data, split } => eval(&checkpoint, &data, split),
        Command::Synth {
            classes,
            per_class,
            out,
            frames,
            joints,
            seed,
            noise,
        } => {
            let spec = match joints {
                6 => tiny_pyramid(),
                n => default_pyramid(n)?,
            };
            let opts = SynthOptions {
                classes,
                per_class,
                frames,
                noise_sigma: noise,
                seed,
                ..SynthOptions::default()
            };
            let seqs = synth_generate(&opts, &spec)?;
            save_dataset(&out, &seqs)?;
            spec.save(&out.join(PYRAMID_FILE))?;
            println!("wrote {} sequences to {}", seqs.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Split {
            fraction,
            seed,
            data,
            test_fraction,
            unstratified,
            out,
        } => {
            let seqs = load_dataset(&data)?;
            let split = draw_split(&seqs, fraction, test_fraction, !unstratified, seed)?;
            let path = out.unwrap_or_else(|| data.join(SPLIT_FILE));
            split.save(&path)?;
            println!(
                "labeled {} / unlabeled {} / test {} -> {}",
                split.labeled.len(),
                split.unlabeled.len(),
                split.test.len(),
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { config } => {
            let cfg = match config {
                Some(p) => GradcheckConfig::load(&p)?,
                None => GradcheckConfig::default(),
            };
            let o = pipeline_gradcheck(&cfg)?;
            let worst = o.report.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default();
            println!(
                "max relative error {:.3e} over {} coordinates in {} tensors (worst {worst}), {:.1}s: {}",
                o.report.max_rel_error,
                o.report.checked,
                o.tensors,
                o.seconds,
                if o.passed { "PASS" } else { "FAIL" }
            );
            Ok(if o.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Dump {
            checkpoint,
            kinds,
            data,
            out,
            samples,
        } => dump(&checkpoint, &kinds, data, &out, samples),
    }
}

fn draw_split(seqs: &[SkeletonSequence], fraction: f64, test_fraction: f64, stratified: bool, seed: u64) -> Result<DatasetSplit> {
    let items: Vec<_> = seqs.iter().map(|s| (s.id.clone(), s.label)).collect();
    let opts = SplitOptions {
        label_fraction: fraction,
        test_fraction,
        stratified,
    };
    Ok(make_split(&items, opts, &mut RngState::new(seed))?)
}

fn resolve_pyramid(explicit: Option<PathBuf>, data: &Path, seqs: &[SkeletonSequence]) -> Result<PyramidSpec> {
    let path = explicit.or_else(|| Some(data.join(PYRAMID_FILE)).filter(|p| p.is_file()));
    let spec = match path {
        Some(p) => PyramidSpec::load(&p)?,
        None => {
            let n = seqs.first().map(|s| s.n_joints).context("dataset is empty")?;
            default_pyramid(n)?
        }
    };
    if let Some(s) = seqs.iter().find(|s| s.n_joints != spec.n_joints()) {
        bail!("sequence {} has {} joints but the pyramid has {}", s.id, s.n_joints, spec.n_joints());
    }
    Ok(spec)
}

fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    split: Option<PathBuf>,
    pyramid: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<ExitCode> {
    let mut cfg = TrainConfig::load(config)?;
    cfg.apply_env()?;
    let seqs = load_dataset(data)?;
    let spec = resolve_pyramid(pyramid, data, &seqs)?;
    let split_path = split.or_else(|| Some(data.join(SPLIT_FILE)).filter(|p| p.is_file()));
    let split = match split_path {
        Some(p) => DatasetSplit::load(&p)?,
        None => split_from_config(&seqs, &cfg)?,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    split.save(&out.join(SPLIT_FILE))?;
    let resolved = SplitData::resolve(&seqs, &split)?;

    let mut state = match resume {
        Some(p) => {
            let s = load_checkpoint(&p)?;
            if s.config != cfg {
                eprintln!("note: resuming with the checkpoint's stored config");
            }
            s
        }
        None => TrainState::new(&cfg, &spec)?,
    };
    let log_path = out.join(METRICS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    for m in &state.history {
        writeln!(log, "{}", serde_json::to_string(m)?)?;
    }
    let every = state.config.checkpoint_every;
    run_training(&mut state, &resolved, |st, m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| psp::PspError::Invalid(e.to_string()))?;
        println!("{line}");
        if every > 0 && st.epoch % every == 0 {
            save_checkpoint(st, &out.join(format!("checkpoint_epoch{}", st.epoch)))?;
        }
        Ok(())
    })?;
    save_checkpoint(&state, &out.join("checkpoint"))?;
    Ok(ExitCode::SUCCESS)
}

fn eval_set<'a>(seqs: &'a [SkeletonSequence], split: Option<&DatasetSplit>) -> Result<Vec<&'a SkeletonSequence>> {
    Ok(match split {
        Some(sp) if !sp.test.is_empty() => SplitData::resolve(seqs, sp)?.test,
        _ => seqs.iter().filter(|s| s.label.is_some()).collect(),
    })
}

fn load_split(data: &Path, split: Option<PathBuf>) -> Result<Option<DatasetSplit>> {
    let path = split.or_else(|| Some(data.join(SPLIT_FILE)).filter(|p| p.is_file()));
    Ok(path.map(|p| DatasetSplit::load(&p)).transpose()?)
}

fn eval(checkpoint: &Path, data: &Path, split: Option<PathBuf>) -> Result<ExitCode> {
    let state = load_checkpoint(checkpoint)?;
    let seqs = load_dataset(data)?;
    let split = load_split(data, split)?;
    let set = eval_set(&seqs, split.as_ref())?;
    let report: EvalReport = evaluate(&state.model, &set, &state.config)?;
    println!(
        "{}",
        serde_json::json!({
            "accuracy": report.accuracy,
            "correct": report.correct,
            "total": report.total,
            "per_class": report.per_class,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn dump(checkpoint: &Path, kinds: &[String], data: Option<PathBuf>, out: &Path, samples: usize) -> Result<ExitCode> {
    let kinds = kinds.iter().map(|k| k.parse::<DumpKind>()).collect::<psp::Result<Vec<_>>>()?;
    if kinds.is_empty() {
        bail!("--kinds needs at least one of attention, embeddings, metrics, predictions");
    }
    let state = load_checkpoint(checkpoint)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let needs_data = kinds.iter().any(|k| *k != DumpKind::Metrics);
    let seqs = match (&data, needs_data) {
        (Some(d), true) => load_dataset(d)?,
        (None, true) => bail!("--data is required for attention, embeddings and predictions dumps"),
        _ => Vec::new(),
    };
    let cfg = &state.config;
    let coeffs = cfg.hyper.coefficients();
    let batch = || -> Result<Batch> {
        let take: Vec<_> = seqs.iter().take(samples.max(1)).collect();
        Ok(Batch::from_sequences(&take, cfg.target_t, None, cfg.motion)?)
    };
    for k in kinds {
        match k {
            DumpKind::Metrics => {
                let p = dump_metrics(&state.history, out)?;
                println!("metrics -> {}", p.display());
            }
            DumpKind::Attention => {
                let entries = dump_attention(&state.model, &batch()?, &coeffs, out)?;
                println!("attention: {} maps -> {}", entries.len(), out.join(psp::train::ATTENTION_DIR).display());
            }
            DumpKind::Embeddings => {
                let p = dump_embeddings(&state.model, &batch()?, &coeffs, out)?;
                println!("embeddings -> {}", p.display());
            }
            DumpKind::Predictions => {
                let split = load_split(data.as_deref().expect("checked"), None)?;
                let set = eval_set(&seqs, split.as_ref())?;
                let report = evaluate(&state.model, &set, cfg)?;
                let p = dump_predictions(&report.predictions, out)?;
                println!("predictions ({} sequences, accuracy {:.4}) -> {}", report.total, report.accuracy, p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
