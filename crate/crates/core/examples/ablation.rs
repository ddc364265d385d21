//! Contrast-level ablation on a synthetic corpus.
//!
//! cargo run --release --example ablation -- [--config cfg.json] [--seeds 0,1,2]
//!     [--baselines 1,2,3,4,8] [--per-class 50] [--frames 64] [--noise 0.05]

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;

use psp::skeleton::{default_pyramid, synth_generate, SynthOptions};
use psp::train::{ablation_study, baseline_name, TrainConfig};

#[derive(Parser)]
struct Args {
    /// Base training config; defaults to the tiny preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 8])]
    baselines: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::tiny(),
    };
    let spec = default_pyramid(25)?;
    let table = ablation_study(
        &cfg,
        &spec,
        &args.seeds,
        &args.baselines,
        |seed| {
            let opts = SynthOptions {
                classes: args.classes,
                per_class: args.per_class,
                frames: args.frames,
                noise_sigma: args.noise,
                seed,
                ..SynthOptions::default()
            };
            Ok(synth_generate(&opts, &spec)?)
        },
        |b, seed, acc| eprintln!("{:<22} seed {seed}: {acc:.3}", baseline_name(b)),
    )?;
    print!("{table}");
    Ok(())
}
