//! Contrastive projection, NT-Xent, the recognition head and the total loss.

use crate::error::{PspError, Result};
use crate::nn::{BatchNorm, Ctx, Linear, ParamStore, LEAKY_SLOPE};
use crate::ppa::{Level, Levels};
use crate::rng::RngState;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.07;

/// Global average pool over time and nodes, then linear → batch norm → leaky
/// ReLU → linear.
#[derive(Clone, Debug)]
pub struct Projector {
    hidden: Linear,
    norm: BatchNorm,
    out: Linear,
}

impl Projector {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, out_dim: usize, rng: &mut RngState) -> Self {
        Projector {
            hidden: Linear::new(store, &format!("{name}.hidden"), channels, channels, true, 1.0, rng),
            norm: BatchNorm::new(store, &format!("{name}.norm"), channels),
            out: Linear::new(store, &format!("{name}.out"), channels, out_dim, true, 1.0, rng),
        }
    }

    /// `[M, C, T, n]` → `[M, C']`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, feat: Var) -> Result<Var> {
        let s = ctx.tape.shape(feat).to_vec();
        if s.len() != 4 || s[1] != self.hidden.d_in {
            return Err(PspError::shape("project", &s, &[0, self.hidden.d_in, 0, 0]));
        }
        let pooled = ctx.tape.mean(feat, &[2, 3])?;
        let h = self.hidden.forward(ctx, pooled)?;
        // pooled features share a large batch-wide component; without this
        // every cosine similarity starts near one
        let h = self.norm.forward(ctx, h)?;
        let h = ctx.tape.leaky_relu(h, LEAKY_SLOPE)?;
        self.out.forward(ctx, h)
    }
}

/// One projector per modality over a stacked `[2M, C, T, n]` batch, joint
/// rows first. Separate heads (and normalization statistics) keep the
/// modality offset out of the cosine similarities.
#[derive(Clone, Debug)]
pub struct PairProjector {
    pub joint: Projector,
    pub motion: Projector,
}

impl PairProjector {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, out_dim: usize, rng: &mut RngState) -> Self {
        PairProjector {
            joint: Projector::new(store, &format!("{name}.joint"), channels, out_dim, rng),
            motion: Projector::new(store, &format!("{name}.motion"), channels, out_dim, rng),
        }
    }

    /// `[2M, C, T, n]` → `[2M, C']`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, stacked: Var) -> Result<Var> {
        let rows = ctx.tape.shape(stacked)[0];
        if rows < 2 || rows % 2 != 0 {
            return Err(PspError::shape("project", ctx.tape.shape(stacked), &[2, 0, 0, 0]));
        }
        let m = rows / 2;
        let first: Vec<usize> = (0..m).collect();
        let second: Vec<usize> = (m..rows).collect();
        let fj = ctx.tape.index_select(stacked, 0, &first)?;
        let fm = ctx.tape.index_select(stacked, 0, &second)?;
        let zj = self.joint.forward(ctx, fj)?;
        let zm = self.motion.forward(ctx, fm)?;
        ctx.tape.concat(&[zj, zm], 0)
    }
}

/// NT-Xent over `2M` rows where row `i` and row `(i + M) mod 2M` are positives.
///
/// Cosine similarities divided by `tau`; each anchor's denominator covers
/// every other row, the positive included. Returns the mean over anchors.
pub fn ntxent(tape: &mut Tape, u: Var, tau: f64) -> Result<Var> {
    let s = tape.shape(u).to_vec();
    if s.len() != 2 || s[0] < 2 || s[0] % 2 != 0 {
        return Err(PspError::shape("ntxent", &s, &[2, 0]));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(PspError::Domain {
            op: "ntxent",
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    let (rows, dim) = (s[0], s[1]);
    let half = rows / 2;
    if let Some(r) = (0..rows).find(|&r| tape.value(u).data()[r * dim..(r + 1) * dim].iter().all(|&v| v == 0.0)) {
        return Err(PspError::Domain {
            op: "ntxent",
            msg: format!("row {r} has zero norm; cosine similarity undefined"),
        });
    }

    let sq = tape.mul(u, u)?;
    let norm2 = tape.sum(sq, &[1])?;
    let norm = tape.sqrt(norm2)?;
    let norm = tape.reshape(norm, &[rows, 1])?;
    let unit = tape.div(u, norm)?;
    let unit_t = tape.transpose(unit)?;
    let sim = tape.matmul(unit, unit_t)?;
    let logits = tape.scale(sim, 1.0 / tau)?;

    let mut self_mask = Tensor::zeros(&[rows, rows]);
    let mut pos_pick = Tensor::zeros(&[rows, rows]);
    for i in 0..rows {
        self_mask.set(&[i, i], f64::NEG_INFINITY);
        pos_pick.set(&[i, (i + half) % rows], 1.0);
    }
    let self_mask = tape.constant(self_mask);
    let pos_pick = tape.constant(pos_pick);
    let masked = tape.add(logits, self_mask)?;
    let denom = tape.logsumexp_last(masked)?;
    let pos = tape.mul(logits, pos_pick)?;
    let pos = tape.sum(pos, &[1])?;
    let per_anchor = tape.sub(denom, pos)?;
    tape.mean_all(per_anchor)
}

/// Per-level contrastive losses; disabled levels are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ContrastLosses {
    pub per_level: Levels<Option<Var>>,
    pub total: Option<Var>,
}

/// Sum of NT-Xent over the enabled levels. `features` holds the
/// `[2M, C, T, n]` polymerizing features of both modalities stacked on the
/// batch axis.
pub fn ccl_total(
    ctx: &mut Ctx<'_>,
    projectors: &Levels<PairProjector>,
    features: &Levels<Option<Var>>,
    levels: &[Level],
    tau: f64,
) -> Result<ContrastLosses> {
    if levels.is_empty() {
        return Err(PspError::Config("contrastive loss needs at least one enabled level".into()));
    }
    let mut out = ContrastLosses::default();
    for l in Level::ALL {
        if !levels.contains(&l) {
            continue;
        }
        let feat = features
            .get(l)
            .ok_or_else(|| PspError::Invalid(format!("no {} features for an enabled level", l.name())))?;
        let z = projectors.get(l).forward(ctx, feat)?;
        let loss = ntxent(&mut ctx.tape, z, tau)?;
        *out.per_level.get_mut(l) = Some(loss);
        out.total = Some(match out.total {
            Some(acc) => ctx.tape.add(acc, loss)?,
            None => loss,
        });
    }
    Ok(out)
}

/// Per-modality linear classifiers on average-pooled encoder features.
#[derive(Clone, Debug)]
pub struct RecognitionHead {
    pub joint: Linear,
    pub motion: Linear,
    pub classes: usize,
}

impl RecognitionHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, classes: usize, rng: &mut RngState) -> Result<Self> {
        if classes < 2 {
            return Err(PspError::Config(format!("need at least 2 classes, got {classes}")));
        }
        Ok(RecognitionHead {
            joint: Linear::new(store, &format!("{name}.joint"), channels, classes, true, 1.0, rng),
            motion: Linear::new(store, &format!("{name}.motion"), channels, classes, true, 1.0, rng),
            classes,
        })
    }

    /// Summed logits `FC_j(AP(f_j)) + FC_m(AP(f_m))`, `[M, classes]`.
    pub fn logits(&self, ctx: &mut Ctx<'_>, f_joint: Var, f_motion: Var) -> Result<Var> {
        let pj = ctx.tape.mean(f_joint, &[2, 3])?;
        let lj = self.joint.forward(ctx, pj)?;
        let pm = ctx.tape.mean(f_motion, &[2, 3])?;
        let lm = self.motion.forward(ctx, pm)?;
        ctx.tape.add(lj, lm)
    }

    /// Logits and the batch-mean cross-entropy against one-hot `y`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, f_joint: Var, f_motion: Var, y: &Tensor) -> Result<(Var, Var)> {
        let logits = self.logits(ctx, f_joint, f_motion)?;
        let loss = ctx.tape.softmax_cross_entropy(logits, y)?;
        Ok((logits, loss))
    }
}

/// `L_con + L_reg`; an absent term counts as zero.
pub fn total_loss(tape: &mut Tape, l_con: Option<Var>, l_reg: Option<Var>) -> Result<Var> {
    match (l_con, l_reg) {
        (Some(c), Some(r)) => tape.add(c, r),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => Err(PspError::Invalid("total loss needs at least one term".into())),
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let k = s[s.len() - 1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
