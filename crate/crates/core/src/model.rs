//! The assembled network: two modality encoders, shared pyramid attention and
//! projectors, and the recognition head.

use serde::{Deserialize, Serialize};

use crate::ccl::{ccl_total, total_loss, ContrastLosses, PairProjector, RecognitionHead, DEFAULT_TAU};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{PspError, Result};
use crate::nn::{Ctx, ParamStore};
use crate::ppa::{pyramid_transform, Coefficients, Level, Levels, Ppa, PpaOutput};
use crate::rng::RngState;
use crate::skeleton::{Batch, PyramidSpec};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Heads of the pyramid attention; must divide the encoder width.
    pub ppa_heads: usize,
    /// Width of the contrastive space.
    pub projection_dim: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            ppa_heads: 4,
            projection_dim: 32,
            classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                hidden_channels: 8,
                blocks: 1,
                heads: 2,
                ..EncoderConfig::default()
            },
            ppa_heads: 2,
            projection_dim: 16,
            classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.ppa_heads == 0 || self.encoder.hidden_channels % self.ppa_heads != 0 {
            return Err(PspError::Config(format!(
                "ppa_heads {} must divide hidden_channels {}",
                self.ppa_heads, self.encoder.hidden_channels
            )));
        }
        if self.projection_dim == 0 {
            return Err(PspError::Config("projection_dim must be positive".into()));
        }
        if self.classes < 2 {
            return Err(PspError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        let c = Coefficients::NTU;
        Hyper {
            lambda: c.lambda,
            alpha: c.alpha,
            beta: c.beta,
            tau: DEFAULT_TAU,
        }
    }
}

impl Hyper {
    pub fn coefficients(&self) -> Coefficients {
        Coefficients {
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coefficients().validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(PspError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// When false, pyramid features skip the attention and go straight to the projectors.
    pub use_ppa: bool,
    pub enabled_levels: Vec<Level>,
    /// Labeled data and the recognition loss only.
    pub supervised_only: bool,
    /// Also contrast the labeled batch.
    pub ccl_on_labeled: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_ppa: true,
            enabled_levels: Level::ALL.to_vec(),
            supervised_only: false,
            ccl_on_labeled: false,
        }
    }
}

impl Ablation {
    /// Contrast-level baselines 1..=8: 1 has no contrastive loss, 2-4 a single
    /// level (joint, part, body), 5-7 pairs, 8 all three.
    pub fn baseline(index: usize) -> Result<Self> {
        use Level::*;
        let levels: &[Level] = match index {
            1 => &[],
            2 => &[Joint],
            3 => &[Part],
            4 => &[Body],
            5 => &[Part, Joint],
            6 => &[Body, Joint],
            7 => &[Body, Part],
            8 => &[Body, Part, Joint],
            i => return Err(PspError::Config(format!("no contrast baseline {i}; expected 1..=8"))),
        };
        Ok(Ablation {
            use_ppa: true,
            enabled_levels: levels.to_vec(),
            supervised_only: index == 1,
            ccl_on_labeled: false,
        })
    }

    pub fn contrastive(&self) -> bool {
        !self.supervised_only
    }

    pub fn validate(&self) -> Result<()> {
        if self.contrastive() && self.enabled_levels.is_empty() {
            return Err(PspError::Config(
                "enabled_levels is empty while contrastive training is on; set supervised_only".into(),
            ));
        }
        let mut seen = self.enabled_levels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.enabled_levels.len() {
            return Err(PspError::Config("enabled_levels lists a level twice".into()));
        }
        Ok(())
    }
}

/// Settings of the contrastive branch for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastSettings {
    pub coefficients: Coefficients,
    pub tau: f64,
    pub levels: Vec<Level>,
    pub use_ppa: bool,
}

impl ContrastSettings {
    pub fn new(hyper: &Hyper, ablation: &Ablation) -> Option<Self> {
        ablation.contrastive().then(|| ContrastSettings {
            coefficients: hyper.coefficients(),
            tau: hyper.tau,
            levels: ablation.enabled_levels.clone(),
            use_ppa: ablation.use_ppa,
        })
    }
}

pub struct ContrastOutput {
    pub losses: ContrastLosses,
    /// Present when the pyramid attention ran.
    pub ppa: Option<PpaOutput>,
}

/// Loss graph of one optimization step.
pub struct StepGraph {
    pub l_reg: Option<Var>,
    pub contrast: Option<ContrastOutput>,
    pub total: Var,
    pub logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct PspModel {
    pub cfg: ModelConfig,
    pub frames: usize,
    pub spec: PyramidSpec,
    pub store: ParamStore,
    pub encoder_joint: Encoder,
    pub encoder_motion: Encoder,
    pub ppa: Ppa,
    pub projectors: Levels<PairProjector>,
    pub head: RecognitionHead,
}

impl PspModel {
    /// Initializes every module from stream 0 of `seed` in a fixed order. The
    /// pyramid attention is always initialized so ablations share draws.
    pub fn new(cfg: &ModelConfig, spec: &PyramidSpec, frames: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if frames < 2 {
            return Err(PspError::Config(format!("need at least 2 frames, got {frames}")));
        }
        let mut rng = RngState::with_stream(seed, 0);
        let mut store = ParamStore::new();
        let n = spec.n_joints();
        let c = cfg.encoder.hidden_channels;
        let encoder_joint = Encoder::new(&mut store, "encoder_joint", &cfg.encoder, n, &mut rng)?;
        let encoder_motion = Encoder::new(&mut store, "encoder_motion", &cfg.encoder, n, &mut rng)?;
        let ppa = Ppa::new(&mut store, "ppa", c, frames, cfg.ppa_heads, spec, &mut rng)?;
        let projectors = Levels::from_fn(|l| {
            PairProjector::new(&mut store, &format!("projector.{}", l.name()), c, cfg.projection_dim, &mut rng)
        });
        let head = RecognitionHead::new(&mut store, "classifier", c, cfg.classes, &mut rng)?;
        Ok(PspModel {
            cfg: cfg.clone(),
            frames,
            spec: spec.clone(),
            store,
            encoder_joint,
            encoder_motion,
            ppa,
            projectors,
            head,
        })
    }

    fn check_batch(&self, b: &Batch) -> Result<()> {
        let s = b.joint.shape();
        if s[2] != self.frames || s[3] != self.spec.n_joints() {
            return Err(PspError::shape(
                "model input",
                s,
                &[s[0], 3, self.frames, self.spec.n_joints()],
            ));
        }
        Ok(())
    }

    /// Joint and motion features, each `[M, C, T, N]`.
    pub fn encode(&self, ctx: &mut Ctx<'_>, batch: &Batch) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let xj = ctx.tape.constant(batch.joint.clone());
        let xm = ctx.tape.constant(batch.motion.clone());
        let fj = self.encoder_joint.forward(ctx, xj)?;
        let fm = self.encoder_motion.forward(ctx, xm)?;
        Ok((fj, fm))
    }

    /// Contrastive branch on one batch: both modalities are stacked on the
    /// batch axis (joint rows first) and share one pyramid pass.
    pub fn contrast(&self, ctx: &mut Ctx<'_>, f_joint: Var, f_motion: Var, s: &ContrastSettings) -> Result<ContrastOutput> {
        let stacked = ctx.tape.concat(&[f_joint, f_motion], 0)?;
        let (features, ppa) = if s.use_ppa {
            let out = self.ppa.forward(ctx, stacked, &s.coefficients, &s.levels)?;
            (out.features, Some(out))
        } else {
            let lv = pyramid_transform(&mut ctx.tape, stacked, &self.spec)?;
            (Levels::from_fn(|l| Some(*lv.get(l))), None)
        };
        let losses = ccl_total(ctx, &self.projectors, &features, &s.levels, s.tau)?;
        Ok(ContrastOutput { losses, ppa })
    }

    /// Projected `[2M, C']` contrasting features of one level (joint rows first).
    pub fn embeddings(&self, ctx: &mut Ctx<'_>, out: &PpaOutput, level: Level) -> Result<Var> {
        let feat = out
            .features
            .get(level)
            .ok_or_else(|| PspError::Invalid(format!("{} level was not computed", level.name())))?;
        self.projectors.get(level).forward(ctx, feat)
    }

    /// Class logits `[M, classes]`.
    pub fn logits(&self, ctx: &mut Ctx<'_>, batch: &Batch) -> Result<Var> {
        let (fj, fm) = self.encode(ctx, batch)?;
        self.head.logits(ctx, fj, fm)
    }

    /// Builds `L = L_con + L_reg` for one step. The labeled batch feeds the
    /// recognition loss, the unlabeled batch the contrastive loss; with
    /// `ccl_on_labeled` the labeled batch is contrasted as well.
    pub fn step_graph(
        &self,
        ctx: &mut Ctx<'_>,
        labeled: Option<&Batch>,
        unlabeled: Option<&Batch>,
        contrast: Option<&ContrastSettings>,
        ccl_on_labeled: bool,
    ) -> Result<StepGraph> {
        if labeled.is_none() && unlabeled.is_none() {
            return Err(PspError::Invalid("train step needs a labeled or an unlabeled batch".into()));
        }
        let mut l_reg = None;
        let mut logits = None;
        let mut con: Option<ContrastOutput> = None;
        let add_con = |ctx: &mut Ctx<'_>, out: ContrastOutput, con: &mut Option<ContrastOutput>| -> Result<()> {
            *con = Some(match con.take() {
                None => out,
                Some(mut prev) => {
                    for l in Level::ALL {
                        let merged = match (*prev.losses.per_level.get(l), *out.losses.per_level.get(l)) {
                            (Some(a), Some(b)) => Some(ctx.tape.add(a, b)?),
                            (a, b) => a.or(b),
                        };
                        *prev.losses.per_level.get_mut(l) = merged;
                    }
                    prev.losses.total = match (prev.losses.total, out.losses.total) {
                        (Some(a), Some(b)) => Some(ctx.tape.add(a, b)?),
                        (a, b) => a.or(b),
                    };
                    prev
                }
            });
            Ok(())
        };

        if let Some(b) = labeled {
            let y = b
                .labels
                .as_ref()
                .ok_or_else(|| PspError::Invalid("labeled batch carries no labels".into()))?;
            let (fj, fm) = self.encode(ctx, b)?;
            let (lg, loss) = self.head.forward(ctx, fj, fm, y)?;
            l_reg = Some(loss);
            logits = Some(lg);
            if let (Some(s), true) = (contrast, ccl_on_labeled) {
                let out = self.contrast(ctx, fj, fm, s)?;
                add_con(ctx, out, &mut con)?;
            }
        }
        if let (Some(b), Some(s)) = (unlabeled, contrast) {
            let (fj, fm) = self.encode(ctx, b)?;
            let out = self.contrast(ctx, fj, fm, s)?;
            add_con(ctx, out, &mut con)?;
        }
        let l_con = con.as_ref().and_then(|c| c.losses.total);
        let total = match (l_con, l_reg) {
            (None, None) => {
                return Err(PspError::Invalid(
                    "step produced no loss: unlabeled-only step with the contrastive branch disabled".into(),
                ))
            }
            (c, r) => total_loss(&mut ctx.tape, c, r)?,
        };
        Ok(StepGraph {
            l_reg,
            contrast: con,
            total,
            logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::skeleton::{synth_generate, tiny_pyramid, MotionKind, SynthOptions};

    fn batch(spec: &PyramidSpec, frames: usize, m: usize, seed: u64) -> Batch {
        let opts = SynthOptions {
            classes: 2,
            per_class: m.div_ceil(2),
            frames: 10,
            seed,
            ..SynthOptions::default()
        };
        let seqs = synth_generate(&opts, spec).unwrap();
        let refs: Vec<_> = seqs.iter().take(m).collect();
        Batch::from_sequences(&refs, frames, Some(4), MotionKind::Forward).unwrap()
    }

    #[test]
    fn baselines_are_distinct() {
        let all: Vec<_> = (1..=8).map(|i| Ablation::baseline(i).unwrap()).collect();
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
            all[i].validate().unwrap();
        }
        assert!(Ablation::baseline(9).is_err());
    }

    #[test]
    fn step_graph_components() {
        let spec = tiny_pyramid();
        let model = PspModel::new(&ModelConfig::tiny(), &spec, 4, 3).unwrap();
        let lab = batch(&spec, 4, 2, 1);
        let unl = batch(&spec, 4, 3, 2);
        let s = ContrastSettings::new(&Hyper::default(), &Ablation::default());

        let mut ctx = Ctx::new(&model.store, Mode::Train);
        let g = model.step_graph(&mut ctx, Some(&lab), Some(&unl), s.as_ref(), false).unwrap();
        let reg = ctx.tape.value(g.l_reg.unwrap()).item();
        let con = g.contrast.as_ref().unwrap();
        let parts: f64 = Level::ALL
            .iter()
            .map(|&l| ctx.tape.value(con.losses.per_level.get(l).unwrap()).item())
            .sum();
        let total = ctx.tape.value(g.total).item();
        assert!((total - reg - parts).abs() < 1e-12);

        let mut ctx = Ctx::new(&model.store, Mode::Train);
        let g = model.step_graph(&mut ctx, Some(&lab), Some(&unl), None, false).unwrap();
        assert!(g.contrast.is_none());
        assert_eq!(ctx.tape.value(g.total).item(), reg);

        let mut ctx = Ctx::new(&model.store, Mode::Train);
        assert!(model.step_graph(&mut ctx, None, Some(&unl), None, false).is_err());
        assert!(model.step_graph(&mut ctx, None, None, s.as_ref(), false).is_err());
    }
}
