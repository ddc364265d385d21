use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::ccl::argmax_rows;
use crate::error::{PspError, Result};
use crate::model::{ContrastSettings, PspModel};
use crate::nn::{Ctx, Mode};
use crate::optim::SgdNesterov;
use crate::rng::RngState;
use crate::skeleton::{Batch, DatasetSplit, PyramidSpec, SkeletonSequence};
use crate::train::TrainConfig;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_con")]
    pub l_con: f64,
    /// Body level.
    #[serde(rename = "L_z")]
    pub l_z: f64,
    /// Part level.
    #[serde(rename = "L_h")]
    pub l_h: f64,
    /// Joint level.
    #[serde(rename = "L_g")]
    pub l_g: f64,
    pub test_acc: Option<f64>,
}

/// Scalar loss values of one step; absent terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub l_reg: Option<f64>,
    pub l_con: Option<f64>,
    pub body: Option<f64>,
    pub part: Option<f64>,
    pub joint: Option<f64>,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: PspModel,
    pub optimizer: SgdNesterov,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimization steps taken so far.
    pub step: usize,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, spec: &PyramidSpec) -> Result<Self> {
        config.validate()?;
        let model = PspModel::new(&config.model, spec, config.target_t, config.seed)?;
        let optimizer = SgdNesterov::new(&model.store, config.momentum, config.weight_decay)?;
        Ok(TrainState {
            config: config.clone(),
            model,
            optimizer,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn contrast_settings(&self) -> Option<ContrastSettings> {
        ContrastSettings::new(&self.config.hyper, &self.config.ablation)
    }
}

/// Forward, backward and one optimizer update.
pub fn train_step(
    state: &mut TrainState,
    labeled: Option<&Batch>,
    unlabeled: Option<&Batch>,
    lr: f64,
    rng: &mut RngState,
) -> Result<StepLosses> {
    let settings = state.contrast_settings();
    let unlabeled = if settings.is_some() { unlabeled } else { None };
    let model = &state.model;
    let mut ctx = Ctx::new(&model.store, Mode::Train).with_rng(rng);
    let graph = model.step_graph(
        &mut ctx,
        labeled,
        unlabeled,
        settings.as_ref(),
        state.config.ablation.ccl_on_labeled,
    )?;
    let val = |v: Option<crate::tensor::Var>| v.map(|v| ctx.tape.value(v).item());
    let con = graph.contrast.as_ref().map(|c| c.losses);
    let losses = StepLosses {
        total: ctx.tape.value(graph.total).item(),
        l_reg: val(graph.l_reg),
        l_con: val(con.and_then(|c| c.total)),
        body: val(con.and_then(|c| c.per_level.body)),
        part: val(con.and_then(|c| c.per_level.part)),
        joint: val(con.and_then(|c| c.per_level.joint)),
    };
    if !losses.total.is_finite() {
        return Err(PspError::NonFinite(format!("training loss at step {}", state.step)));
    }
    ctx.tape.backward(graph.total)?;
    let grads = ctx.param_grads();
    let stats = ctx.take_stat_updates();
    drop(ctx);

    let store = &mut state.model.store;
    store.accumulate_grads(&grads);
    state.optimizer.step(store, lr)?;
    store.apply_stat_updates(&stats);
    state.step += 1;
    Ok(losses)
}

/// Sequences resolved against a split.
pub struct SplitData<'a> {
    pub labeled: Vec<&'a SkeletonSequence>,
    pub unlabeled: Vec<&'a SkeletonSequence>,
    pub test: Vec<&'a SkeletonSequence>,
}

impl<'a> SplitData<'a> {
    pub fn resolve(dataset: &'a [SkeletonSequence], split: &DatasetSplit) -> Result<Self> {
        split.validate()?;
        let by_id: HashMap<&str, &SkeletonSequence> = dataset.iter().map(|s| (s.id.as_str(), s)).collect();
        let pick = |ids: &[String], what: &str| -> Result<Vec<&'a SkeletonSequence>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| PspError::Invalid(format!("{what} id {id} is not in the dataset")))
                })
                .collect()
        };
        let labeled = pick(&split.labeled, "labeled")?;
        if let Some(s) = labeled.iter().find(|s| s.label.is_none()) {
            return Err(PspError::Invalid(format!("labeled sequence {} has no label", s.id)));
        }
        Ok(SplitData {
            labeled,
            unlabeled: pick(&split.unlabeled, "unlabeled")?,
            test: pick(&split.test, "test")?,
        })
    }
}

#[derive(Default)]
struct Running {
    sum: f64,
    n: usize,
}

impl Running {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

fn batches<'a>(
    seqs: &[&'a SkeletonSequence],
    size: usize,
    rng: &mut RngState,
) -> Vec<Vec<&'a SkeletonSequence>> {
    let mut order: Vec<&SkeletonSequence> = seqs.to_vec();
    rng.shuffle(&mut order);
    order.chunks(size).map(<[_]>::to_vec).collect()
}

/// Runs one epoch and appends its metrics to the history.
///
/// Each step pairs one labeled and one unlabeled minibatch while both remain;
/// the rest of the longer stream runs alone. The epoch's shuffles and dropout
/// masks come from stream `epoch + 1` of the seed, so resuming at an epoch
/// boundary reproduces an uninterrupted run.
pub fn run_epoch(state: &mut TrainState, data: &SplitData<'_>) -> Result<EpochMetrics> {
    let cfg = state.config.clone();
    if data.labeled.is_empty() {
        return Err(PspError::Invalid("labeled set is empty; the recognition loss needs labels".into()));
    }
    let epoch = state.epoch;
    let mut rng = RngState::with_stream(cfg.seed, epoch as u64 + 1);
    let lab = batches(&data.labeled, cfg.batch_size_labeled, &mut rng);
    let unl = if cfg.ablation.supervised_only {
        Vec::new()
    } else {
        batches(&data.unlabeled, cfg.batch_size_unlabeled, &mut rng)
    };
    let steps = lab.len().max(unl.len());
    let schedule = cfg.schedule();
    let classes = Some(cfg.model.classes);
    let mut reg = Running::default();
    let mut con = Running::default();
    let mut body = Running::default();
    let mut part = Running::default();
    let mut joint = Running::default();
    let mut lr = 0.0;
    for i in 0..steps {
        let lb = lab
            .get(i)
            .map(|b| Batch::from_sequences(b, cfg.target_t, classes, cfg.motion))
            .transpose()?;
        let ub = unl
            .get(i)
            .map(|b| Batch::from_sequences(b, cfg.target_t, None, cfg.motion))
            .transpose()?;
        lr = schedule.rate(epoch, i, steps);
        let l = train_step(state, lb.as_ref(), ub.as_ref(), lr, &mut rng)?;
        reg.push(l.l_reg);
        con.push(l.l_con);
        body.push(l.body);
        part.push(l.part);
        joint.push(l.joint);
    }
    recalibrate_batch_norm(state, data)?;
    let test_acc = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, &data.test, &cfg)?.accuracy)
    };
    let m = EpochMetrics {
        epoch,
        lr,
        l_reg: reg.mean(),
        l_con: con.mean(),
        l_z: body.mean(),
        l_h: part.mean(),
        l_g: joint.mean(),
        test_acc,
    };
    state.history.push(m.clone());
    state.epoch += 1;
    Ok(m)
}

/// Re-estimates every batch-norm running statistic with the current weights:
/// the average of batch statistics over the training sequences in fixed
/// batches, no dropout. Moving averages collected during training lag behind
/// weights that change every step; train-mode outputs do not depend on them,
/// so this only affects evaluation.
pub fn recalibrate_batch_norm(state: &mut TrainState, data: &SplitData<'_>) -> Result<()> {
    let cfg = &state.config;
    let settings = state.contrast_settings();
    let mut seqs: Vec<&SkeletonSequence> = data.labeled.clone();
    if !cfg.ablation.supervised_only {
        seqs.extend(&data.unlabeled);
    }
    let size = cfg.batch_size_unlabeled.max(cfg.batch_size_labeled).max(2);
    let mut passes = Vec::new();
    for chunk in seqs.chunks(size) {
        if chunk.len() < 2 {
            continue;
        }
        let b = Batch::from_sequences(chunk, cfg.target_t, None, cfg.motion)?;
        let mut ctx = Ctx::new(&state.model.store, Mode::Calibrate);
        let (fj, fm) = state.model.encode(&mut ctx, &b)?;
        if let Some(s) = &settings {
            state.model.contrast(&mut ctx, fj, fm, s)?;
        }
        passes.push(ctx.take_stat_updates());
    }
    state.model.store.set_running_stats(&passes);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub label: Option<usize>,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<Prediction>,
}

const EVAL_BATCH: usize = 64;

/// Predicted class per sequence, eval mode; ties go to the lowest class.
pub fn predict(model: &PspModel, seqs: &[&SkeletonSequence], cfg: &TrainConfig) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        let b = Batch::from_sequences(chunk, cfg.target_t, None, cfg.motion)?;
        let mut ctx = Ctx::new(&model.store, Mode::Eval);
        let logits = model.logits(&mut ctx, &b)?;
        out.extend(argmax_rows(ctx.tape.value(logits)));
    }
    Ok(out)
}

/// Accuracy over labeled sequences.
pub fn evaluate(model: &PspModel, seqs: &[&SkeletonSequence], cfg: &TrainConfig) -> Result<EvalReport> {
    if seqs.is_empty() {
        return Err(PspError::Invalid("evaluation set is empty".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.label.is_none()) {
        return Err(PspError::Invalid(format!("evaluation sequence {} has no label", s.id)));
    }
    let preds = predict(model, seqs, cfg)?;
    let k = cfg.model.classes;
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    let mut predictions = Vec::with_capacity(seqs.len());
    for (s, &p) in seqs.iter().zip(&preds) {
        let y = s.label.expect("checked");
        if y < k {
            counts[y] += 1;
            hits[y] += usize::from(p == y);
        }
        predictions.push(Prediction {
            id: s.id.clone(),
            label: s.label,
            predicted: p,
        });
    }
    let correct = predictions.iter().filter(|p| p.label == Some(p.predicted)).count();
    Ok(EvalReport {
        accuracy: correct as f64 / seqs.len() as f64,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        correct,
        total: seqs.len(),
        predictions,
    })
}

/// Runs epochs until `total_epochs`, calling `after_epoch` after each one
/// (for logging and checkpoints).
pub fn run_training<F>(state: &mut TrainState, data: &SplitData<'_>, mut after_epoch: F) -> Result<()>
where
    F: FnMut(&TrainState, &EpochMetrics) -> Result<()>,
{
    while state.epoch < state.config.total_epochs {
        let m = run_epoch(state, data)?;
        after_epoch(state, &m)?;
    }
    Ok(())
}
