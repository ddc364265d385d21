//! Skeleton pyramid transform and pyramid polymerizing attention.
//!
//! Features use the `[M, C, T, n]` layout with `n` the node count of a level
//! (B bodies, P parts or N joints). Attention is node-to-node with time folded
//! into the feature axis: each head sees `T * C / S` features per node.

use serde::{Deserialize, Serialize};

use crate::error::{PspError, Result};
use crate::nn::{BatchNorm, Ctx, Linear, ParamStore, LEAKY_SLOPE};
use crate::rng::RngState;
use crate::skeleton::PyramidSpec;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Body,
    Part,
    Joint,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Body, Level::Part, Level::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Level::Body => "body",
            Level::Part => "part",
            Level::Joint => "joint",
        }
    }

    pub fn nodes(self, spec: &PyramidSpec) -> usize {
        match self {
            Level::Body => spec.n_bodies(),
            Level::Part => spec.n_parts(),
            Level::Joint => spec.n_joints(),
        }
    }
}

/// One value per pyramid level.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Levels<T> {
    pub body: T,
    pub part: T,
    pub joint: T,
}

impl<T> Levels<T> {
    pub fn get(&self, l: Level) -> &T {
        match l {
            Level::Body => &self.body,
            Level::Part => &self.part,
            Level::Joint => &self.joint,
        }
    }

    pub fn get_mut(&mut self, l: Level) -> &mut T {
        match l {
            Level::Body => &mut self.body,
            Level::Part => &mut self.part,
            Level::Joint => &mut self.joint,
        }
    }

    pub fn from_fn(mut f: impl FnMut(Level) -> T) -> Self {
        Levels {
            body: f(Level::Body),
            part: f(Level::Part),
            joint: f(Level::Joint),
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Level) -> std::result::Result<T, E>) -> std::result::Result<Self, E> {
        Ok(Levels {
            body: f(Level::Body)?,
            part: f(Level::Part)?,
            joint: f(Level::Joint)?,
        })
    }
}

/// Cross-level weights: `lambda` lifts body maps into the part level,
/// `alpha` and `beta` lift part and body maps into the joint level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Coefficients {
    pub const NTU: Coefficients = Coefficients {
        lambda: 0.2,
        alpha: 0.12,
        beta: 0.24,
    };
    pub const UCLA: Coefficients = Coefficients {
        lambda: 0.2,
        alpha: 0.1,
        beta: 0.2,
    };
    pub const ZERO: Coefficients = Coefficients {
        lambda: 0.0,
        alpha: 0.0,
        beta: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PspError::Config(format!("{n} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_nodes(tape: &Tape, f: Var, n: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(f);
    if s.len() != 4 || s[3] != n {
        return Err(PspError::shape(op, s, &[0, 0, 0, n]));
    }
    Ok(())
}

/// Joint features unchanged; parts average their joints; bodies average their parts.
pub fn pyramid_transform(tape: &mut Tape, f: Var, spec: &PyramidSpec) -> Result<Levels<Var>> {
    check_nodes(tape, f, spec.n_joints(), "pyramid_transform")?;
    let part = tape.segment_mean(f, 3, &spec.joint_to_part, spec.n_parts())?;
    let body = tape.segment_mean(part, 3, &spec.part_to_body, spec.n_bodies())?;
    Ok(Levels { body, part, joint: f })
}

/// `out[.., i, j] = src[.., phi[i], phi[j]]` over the trailing two axes.
pub fn lift_attention(tape: &mut Tape, src: Var, phi: &[usize]) -> Result<Var> {
    let s = tape.shape(src).to_vec();
    let r = s.len();
    if r < 2 || s[r - 1] != s[r - 2] {
        return Err(PspError::shape("lift_attention", &s, &[phi.len(), phi.len()]));
    }
    if let Some(&bad) = phi.iter().find(|&&p| p >= s[r - 1]) {
        return Err(PspError::Domain {
            op: "lift_attention",
            msg: format!("affiliation index {bad} out of range for {} source nodes", s[r - 1]),
        });
    }
    let rows = tape.index_select(src, r - 2, phi)?;
    tape.index_select(rows, r - 1, phi)
}

/// `tanh(Q K^T / sqrt(d))` with `d` the per-head feature width.
pub fn attention_map(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let sq = tape.shape(q).to_vec();
    if sq != tape.shape(k) {
        return Err(PspError::shape("attention_map", &sq, tape.shape(k)));
    }
    let d = *sq.last().expect("rank checked by matmul") as f64;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / d.sqrt())?;
    tape.tanh(s)
}

fn weighted_add(tape: &mut Tape, base: Var, extra: Var, coeff: f64) -> Result<Var> {
    if coeff == 0.0 {
        return Ok(base);
    }
    let e = tape.scale(extra, coeff)?;
    tape.add(base, e)
}

/// `A_h + lambda * lift(A_z, part_to_body)`.
pub fn polymerize_part(tape: &mut Tape, a_body: Var, a_part: Var, lambda: f64, spec: &PyramidSpec) -> Result<Var> {
    let lifted = lift_attention(tape, a_body, &spec.part_to_body)?;
    weighted_add(tape, a_part, lifted, lambda)
}

/// `A_g + alpha * lift(A_h, joint_to_part) + beta * lift(A_z, joint_to_body)`.
pub fn polymerize_joint(
    tape: &mut Tape,
    a_body: Var,
    a_part: Var,
    a_joint: Var,
    alpha: f64,
    beta: f64,
    spec: &PyramidSpec,
) -> Result<Var> {
    let from_part = lift_attention(tape, a_part, &spec.joint_to_part)?;
    let from_body = lift_attention(tape, a_body, &spec.joint_to_body())?;
    let g = weighted_add(tape, a_joint, from_part, alpha)?;
    weighted_add(tape, g, from_body, beta)
}

/// Every map produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    /// `[M, S, B, B]`
    pub body: Var,
    /// `[M, S, P, P]`
    pub part: Var,
    /// `[M, S, N, N]`
    pub joint: Var,
    /// Body map lifted to the part grid.
    pub lifted_part: Var,
    /// Part map lifted to the joint grid.
    pub lifted_joint_from_part: Var,
    /// Body map lifted to the joint grid.
    pub lifted_joint_from_body: Var,
    /// Part map after polymerization.
    pub polymerized_part: Var,
    /// Joint map after polymerization.
    pub polymerized_joint: Var,
}

impl AttentionMaps {
    /// Map actually multiplied with V at each level.
    pub fn applied(&self, l: Level) -> Var {
        match l {
            Level::Body => self.body,
            Level::Part => self.polymerized_part,
            Level::Joint => self.polymerized_joint,
        }
    }
}

#[derive(Clone, Debug)]
struct LevelBlock {
    query: Linear,
    key: Linear,
    value: Linear,
    ffn: Linear,
    ffn_norm: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct Ppa {
    pub channels: usize,
    pub frames: usize,
    pub heads: usize,
    pub spec: PyramidSpec,
    blocks: Levels<LevelBlock>,
}

pub struct PpaOutput {
    /// Polymerizing features for the requested levels, `[M, C, T, n]`.
    pub features: Levels<Option<Var>>,
    pub maps: AttentionMaps,
    pub inputs: Levels<Var>,
}

impl Ppa {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        frames: usize,
        heads: usize,
        spec: &PyramidSpec,
        rng: &mut RngState,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(PspError::Config(format!(
                "pyramid attention channels {channels} not divisible by heads {heads}"
            )));
        }
        spec.validate()?;
        let d = frames * channels;
        let gain = 0.5f64.sqrt();
        let blocks = Levels::from_fn(|l| {
            let p = format!("{name}.{}", l.name());
            LevelBlock {
                query: Linear::new(store, &format!("{p}.query"), d, d, false, gain, rng),
                key: Linear::new(store, &format!("{p}.key"), d, d, false, gain, rng),
                value: Linear::new(store, &format!("{p}.value"), d, d, false, gain, rng),
                ffn: Linear::new(store, &format!("{p}.ffn"), d, d, true, 1.0, rng),
                ffn_norm: BatchNorm::new(store, &format!("{p}.ffn_norm"), d),
            }
        });
        Ok(Ppa {
            channels,
            frames,
            heads,
            spec: spec.clone(),
            blocks,
        })
    }

    pub fn head_width(&self) -> usize {
        self.frames * self.channels / self.heads
    }

    /// `[M, C, T, n]` → `[M, n, T*C]`.
    fn flatten_nodes(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels || s[2] != self.frames {
            return Err(PspError::shape("pyramid attention input", &s, &[0, self.channels, self.frames, 0]));
        }
        let x = tape.permute(x, &[0, 3, 2, 1])?;
        tape.reshape(x, &[s[0], s[3], self.frames * self.channels])
    }

    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[s[0], s[1], self.heads, self.head_width()])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// Q, K and V of one level, each `[M, S, n, T*C/S]`.
    pub fn qkv_project(&self, ctx: &mut Ctx<'_>, level: Level, feat: Var) -> Result<(Var, Var, Var)> {
        let (q, k) = self.qk_project(ctx, level, feat)?;
        let v = self.v_project(ctx, level, feat)?;
        Ok((q, k, v))
    }

    fn qk_project(&self, ctx: &mut Ctx<'_>, level: Level, feat: Var) -> Result<(Var, Var)> {
        let b = self.blocks.get(level);
        let x = self.flatten_nodes(&mut ctx.tape, feat)?;
        let q = b.query.forward(ctx, x)?;
        let q = self.split_heads(&mut ctx.tape, q)?;
        let k = b.key.forward(ctx, x)?;
        let k = self.split_heads(&mut ctx.tape, k)?;
        Ok((q, k))
    }

    fn v_project(&self, ctx: &mut Ctx<'_>, level: Level, feat: Var) -> Result<Var> {
        let x = self.flatten_nodes(&mut ctx.tape, feat)?;
        let v = self.blocks.get(level).value.forward(ctx, x)?;
        self.split_heads(&mut ctx.tape, v)
    }

    /// `leaky_relu(Psi(concat_heads(A V)) + feat)` where Psi is linear + batch norm.
    pub fn block(&self, ctx: &mut Ctx<'_>, level: Level, feat: Var, attn: Var, v: Var) -> Result<Var> {
        let sa = ctx.tape.shape(attn).to_vec();
        let sv = ctx.tape.shape(v).to_vec();
        if sa.len() != 4 || sv.len() != 4 || sa[3] != sv[2] {
            return Err(PspError::shape("ppa_block", &sa, &sv));
        }
        let (m, n) = (sv[0], sv[2]);
        let b = self.blocks.get(level);
        let av = ctx.tape.matmul(attn, v)?;
        let av = ctx.tape.permute(av, &[0, 2, 1, 3])?;
        let av = ctx.tape.reshape(av, &[m, n, self.frames * self.channels])?;
        let y = b.ffn.forward(ctx, av)?;
        let y = b.ffn_norm.forward(ctx, y)?;
        let y = ctx.tape.reshape(y, &[m, n, self.frames, self.channels])?;
        let y = ctx.tape.permute(y, &[0, 3, 2, 1])?;
        let y = ctx.tape.add(y, feat)?;
        ctx.tape.leaky_relu(y, LEAKY_SLOPE)
    }

    /// Full pyramid pass. Polymerizing features are produced only for
    /// `levels`; attention maps are always computed for every level.
    pub fn forward(&self, ctx: &mut Ctx<'_>, f: Var, coeffs: &Coefficients, levels: &[Level]) -> Result<PpaOutput> {
        coeffs.validate()?;
        let inputs = pyramid_transform(&mut ctx.tape, f, &self.spec)?;
        let qk = Levels::try_from_fn(|l| self.qk_project(ctx, l, *inputs.get(l)))?;
        let raw = Levels::try_from_fn(|l| {
            let (q, k) = *qk.get(l);
            attention_map(&mut ctx.tape, q, k)
        })?;
        let tape = &mut ctx.tape;
        let spec = &self.spec;
        let lifted_part = lift_attention(tape, raw.body, &spec.part_to_body)?;
        let lifted_joint_from_part = lift_attention(tape, raw.part, &spec.joint_to_part)?;
        let lifted_joint_from_body = lift_attention(tape, raw.body, &spec.joint_to_body())?;
        let polymerized_part = weighted_add(tape, raw.part, lifted_part, coeffs.lambda)?;
        let g = weighted_add(tape, raw.joint, lifted_joint_from_part, coeffs.alpha)?;
        let polymerized_joint = weighted_add(tape, g, lifted_joint_from_body, coeffs.beta)?;
        let maps = AttentionMaps {
            body: raw.body,
            part: raw.part,
            joint: raw.joint,
            lifted_part,
            lifted_joint_from_part,
            lifted_joint_from_body,
            polymerized_part,
            polymerized_joint,
        };

        let mut features = Levels::default();
        for l in Level::ALL {
            if !levels.contains(&l) {
                continue;
            }
            let feat = *inputs.get(l);
            let v = self.v_project(ctx, l, feat)?;
            *features.get_mut(l) = Some(self.block(ctx, l, feat, maps.applied(l), v)?);
        }
        Ok(PpaOutput { features, maps, inputs })
    }
}
