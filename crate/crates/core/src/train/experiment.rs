use std::fmt;

use crate::error::Result;
use crate::model::Ablation;
use crate::rng::RngState;
use crate::skeleton::{make_split, DatasetSplit, PyramidSpec, SkeletonSequence, SplitOptions};
use crate::train::{evaluate, run_training, EvalReport, SplitData, TrainConfig, TrainState};

/// Split drawn from the config's fractions and seed.
pub fn split_from_config(seqs: &[SkeletonSequence], cfg: &TrainConfig) -> Result<DatasetSplit> {
    let items: Vec<_> = seqs.iter().map(|s| (s.id.clone(), s.label)).collect();
    let opts = SplitOptions {
        label_fraction: cfg.label_fraction,
        test_fraction: cfg.test_fraction,
        stratified: cfg.stratified,
    };
    make_split(&items, opts, &mut RngState::new(cfg.seed))
}

/// Trains from scratch for the configured epochs; the report covers the test
/// ids, or `None` when the split has none.
pub fn train_and_evaluate(
    cfg: &TrainConfig,
    spec: &PyramidSpec,
    seqs: &[SkeletonSequence],
    split: &DatasetSplit,
) -> Result<(TrainState, Option<EvalReport>)> {
    let data = SplitData::resolve(seqs, split)?;
    let mut state = TrainState::new(cfg, spec)?;
    run_training(&mut state, &data, |_, _| Ok(()))?;
    let report = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, &data.test, &state.config)?)
    };
    Ok((state, report))
}

pub fn baseline_name(index: usize) -> &'static str {
    match index {
        1 => "B1 supervised only",
        2 => "B2 joint",
        3 => "B3 part",
        4 => "B4 body",
        5 => "B5 part+joint",
        6 => "B6 body+joint",
        7 => "B7 body+part",
        8 => "B8 body+part+joint",
        _ => "?",
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub baseline: usize,
    /// Final test accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, baseline: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.baseline == baseline)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<22}", "baseline")?;
        for s in &self.seeds {
            write!(f, " {:>7}", format!("s{s}"))?;
        }
        writeln!(f, " {:>7}", "mean")?;
        for r in &self.rows {
            write!(f, "{:<22}", baseline_name(r.baseline))?;
            for a in &r.accuracies {
                write!(f, " {:>7.3}", a)?;
            }
            writeln!(f, " {:>7.3}", r.mean())?;
        }
        Ok(())
    }
}

/// Every baseline on every seed. `corpus(seed)` supplies the sequences; the
/// seed also drives the split and the parameter draws, so baselines sharing a
/// seed see identical data and initial weights.
pub fn ablation_study<F>(
    base: &TrainConfig,
    spec: &PyramidSpec,
    seeds: &[u64],
    baselines: &[usize],
    mut corpus: F,
    mut progress: impl FnMut(usize, u64, f64),
) -> Result<AblationTable>
where
    F: FnMut(u64) -> Result<Vec<SkeletonSequence>>,
{
    let mut rows: Vec<AblationRow> = baselines
        .iter()
        .map(|&b| AblationRow {
            baseline: b,
            accuracies: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let seqs = corpus(seed)?;
        let mut cfg = base.clone();
        cfg.seed = seed;
        let split = split_from_config(&seqs, &cfg)?;
        for row in rows.iter_mut() {
            let mut c = cfg.clone();
            c.ablation = Ablation {
                use_ppa: base.ablation.use_ppa,
                ccl_on_labeled: base.ablation.ccl_on_labeled,
                ..Ablation::baseline(row.baseline)?
            };
            let (_, report) = train_and_evaluate(&c, spec, &seqs, &split)?;
            let acc = report.map_or(f64::NAN, |r| r.accuracy);
            progress(row.baseline, seed, acc);
            row.accuracies.push(acc);
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
