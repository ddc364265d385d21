use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{PspError, Result};
use crate::gradcheck::{check_params, GradCheckReport, DEFAULT_FLOOR, DEFAULT_STEP};
use crate::model::{Ablation, ContrastSettings, Hyper, ModelConfig, PspModel};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::rng::RngState;
use crate::skeleton::{synth_generate, tiny_pyramid, Batch, MotionKind, PyramidSpec, SynthOptions};

/// Gradient check of the complete training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Sequences per batch; one labeled and one unlabeled batch are used.
    pub batch_size: usize,
    pub frames: usize,
    pub model: ModelConfig,
    /// Defaults to six joints, four parts, two bodies.
    pub pyramid: Option<PyramidSpec>,
    pub hyper: Hyper,
    pub ablation: Ablation,
    pub seed: u64,
    pub step: f64,
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            batch_size: 2,
            frames: 4,
            model: ModelConfig {
                encoder: EncoderConfig {
                    hidden_channels: 8,
                    blocks: 1,
                    heads: 2,
                    ..EncoderConfig::default()
                },
                ppa_heads: 2,
                projection_dim: 8,
                classes: 3,
            },
            pyramid: None,
            hyper: Hyper::default(),
            ablation: Ablation::default(),
            seed: 0,
            step: DEFAULT_STEP,
            floor: DEFAULT_FLOOR,
            tolerance: 1e-4,
        }
    }
}

impl GradcheckConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PspError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PspError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub report: GradCheckReport,
    pub tensors: usize,
    pub seconds: f64,
    pub passed: bool,
}

fn batches(cfg: &GradcheckConfig, spec: &PyramidSpec) -> Result<(Batch, Batch)> {
    let m = cfg.batch_size;
    let classes = cfg.model.classes;
    let opts = SynthOptions {
        classes,
        per_class: (2 * m).div_ceil(classes),
        frames: 2 * cfg.frames,
        noise_sigma: 0.05,
        seed: cfg.seed,
        ..SynthOptions::default()
    };
    let seqs = synth_generate(&opts, spec)?;
    let mut order: Vec<_> = seqs.iter().collect();
    RngState::with_stream(cfg.seed, 7).shuffle(&mut order);
    if order.len() < 2 * m {
        return Err(PspError::Config("not enough synthetic sequences for the gradient check".into()));
    }
    let lab = Batch::from_sequences(&order[..m], cfg.frames, Some(classes), MotionKind::Forward)?;
    let unl = Batch::from_sequences(&order[m..2 * m], cfg.frames, None, MotionKind::Forward)?;
    Ok((lab, unl))
}

/// Compares analytic gradients of `L_con + L_reg` for every trainable
/// parameter against central differences. Train mode with batch statistics;
/// dropout masks are regenerated from a fixed seed for every evaluation.
pub fn pipeline_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckOutcome> {
    let start = Instant::now();
    let spec = cfg.pyramid.clone().unwrap_or_else(tiny_pyramid);
    let model = PspModel::new(&cfg.model, &spec, cfg.frames, cfg.seed)?;
    let (lab, unl) = batches(cfg, &spec)?;
    let settings = ContrastSettings::new(&cfg.hyper, &cfg.ablation);
    let ccl_on_labeled = cfg.ablation.ccl_on_labeled;

    let run = |store: &ParamStore, grads: bool| -> Result<(f64, Vec<(crate::nn::ParamId, Vec<f64>)>)> {
        let mut rng = RngState::with_stream(cfg.seed, 99);
        let mut ctx = Ctx::new(store, Mode::Train).with_rng(&mut rng);
        let g = model.step_graph(&mut ctx, Some(&lab), Some(&unl), settings.as_ref(), ccl_on_labeled)?;
        let loss = ctx.tape.value(g.total).item();
        if !grads {
            return Ok((loss, Vec::new()));
        }
        ctx.tape.backward(g.total)?;
        Ok((loss, ctx.param_grads()))
    };

    let (_, analytic) = run(&model.store, true)?;
    let params = model.store.trainable_ids();
    let report = check_params(&model.store, &params, &analytic, cfg.step, cfg.floor, |s| {
        run(s, false).map(|(l, _)| l)
    })?;
    let passed = report.max_rel_error < cfg.tolerance;
    Ok(GradcheckOutcome {
        report,
        tensors: params.len(),
        seconds: start.elapsed().as_secs_f64(),
        passed,
    })
}
