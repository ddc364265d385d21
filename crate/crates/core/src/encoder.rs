//! Spatial-attention / temporal-convolution feature encoder.
//!
//! `[M, 3, T, N]` coordinates in, `[M, C, T, N]` features out. Internally the
//! layout is `[M, T, N, C]` so every linear map acts on the last axis.

use serde::{Deserialize, Serialize};

use crate::error::{PspError, Result};
use crate::nn::{fan_in_bound, BatchNorm, Ctx, Linear, ParamId, ParamStore, LEAKY_SLOPE};
use crate::rng::RngState;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub temporal_kernel: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            hidden_channels: 16,
            blocks: 2,
            heads: 2,
            temporal_kernel: 3,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PspError::Config(m));
        if self.in_channels == 0 || self.hidden_channels == 0 || self.heads == 0 {
            return bad("encoder channel and head counts must be positive".into());
        }
        if self.hidden_channels % self.heads != 0 {
            return bad(format!(
                "encoder hidden_channels {} not divisible by heads {}",
                self.hidden_channels, self.heads
            ));
        }
        if self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal_kernel must be odd, got {}", self.temporal_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    attn_norm: BatchNorm,
    conv: ParamId,
    norm: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub n_joints: usize,
    input_norm: BatchNorm,
    embed: Linear,
    /// Learned per-node identity vectors `[N, C]`.
    pub node_embedding: ParamId,
    blocks: Vec<Block>,
    out_norm: BatchNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, n_joints: usize, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.hidden_channels;
        let input_norm = BatchNorm::new(store, &format!("{name}.input_norm"), n_joints * cfg.in_channels);
        let embed = Linear::new(store, &format!("{name}.embed"), cfg.in_channels, c, true, 1.0, rng);
        let node_embedding = store.add(
            format!("{name}.node_embedding"),
            rng.uniform_tensor(&[n_joints, c], fan_in_bound(n_joints)),
            true,
        );
        let attn_gain = 0.5f64.sqrt();
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let p = format!("{name}.block{b}");
                let query = Linear::new(store, &format!("{p}.query"), c, c, true, attn_gain, rng);
                let key = Linear::new(store, &format!("{p}.key"), c, c, true, attn_gain, rng);
                let value = Linear::new(store, &format!("{p}.value"), c, c, true, attn_gain, rng);
                let out = Linear::new(store, &format!("{p}.out"), c, c, true, attn_gain, rng);
                let k = cfg.temporal_kernel;
                let conv = store.add(
                    format!("{p}.conv"),
                    rng.uniform_tensor(&[k, c], attn_gain * fan_in_bound(k)),
                    true,
                );
                let attn_norm = BatchNorm::new(store, &format!("{p}.attn_norm"), c);
                let norm = BatchNorm::new(store, &format!("{p}.norm"), c);
                Block {
                    query,
                    key,
                    value,
                    out,
                    attn_norm,
                    conv,
                    norm,
                }
            })
            .collect();
        let out_norm = BatchNorm::new(store, &format!("{name}.out_norm"), c);
        Ok(Encoder {
            cfg: cfg.clone(),
            n_joints,
            input_norm,
            embed,
            node_embedding,
            blocks,
            out_norm,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.hidden_channels
    }

    /// `x: [M, in, T, N]` → `[M, C, T, N]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[3] != self.n_joints {
            return Err(PspError::shape("encode", &s, &[0, self.cfg.in_channels, 0, self.n_joints]));
        }
        let (m, t, n) = (s[0], s[2], s[3]);
        let c = self.cfg.hidden_channels;
        let heads = self.cfg.heads;
        let dh = c / heads;

        // every coordinate of every joint normalized over batch and time, so
        // the shared rest pose does not swamp the motion around it
        let h = ctx.tape.permute(x, &[0, 2, 3, 1])?;
        let h = ctx.tape.reshape(h, &[m, t, n * self.cfg.in_channels])?;
        let h = self.input_norm.forward(ctx, h)?;
        let h = ctx.tape.reshape(h, &[m, t, n, self.cfg.in_channels])?;
        let h = self.embed.forward(ctx, h)?;
        let ne = ctx.p(self.node_embedding);
        let mut h = ctx.tape.add(h, ne)?;

        for blk in &self.blocks {
            let split = |ctx: &mut Ctx<'_>, v: Var| -> Result<Var> {
                let v = ctx.tape.reshape(v, &[m, t, n, heads, dh])?;
                ctx.tape.permute(v, &[0, 1, 3, 2, 4])
            };
            let q = blk.query.forward(ctx, h)?;
            let q = split(ctx, q)?;
            let k = blk.key.forward(ctx, h)?;
            let k = split(ctx, k)?;
            let v = blk.value.forward(ctx, h)?;
            let v = split(ctx, v)?;
            let kt = ctx.tape.transpose(k)?;
            let scores = ctx.tape.matmul(q, kt)?;
            let scores = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = ctx.tape.tanh(scores)?;
            let mixed = ctx.tape.matmul(attn, v)?;
            let mixed = ctx.tape.permute(mixed, &[0, 1, 3, 2, 4])?;
            let mixed = ctx.tape.reshape(mixed, &[m, t, n, c])?;
            let mixed = blk.out.forward(ctx, mixed)?;
            // tanh weights do not sum to one, so the aggregate scales with N
            let mixed = blk.attn_norm.forward(ctx, mixed)?;
            let mixed = ctx.dropout(mixed, self.cfg.dropout)?;
            h = ctx.tape.add(h, mixed)?;

            let w = ctx.p(blk.conv);
            let y = ctx.tape.temporal_conv(h, w)?;
            let y = blk.norm.forward(ctx, y)?;
            let y = ctx.tape.leaky_relu(y, LEAKY_SLOPE)?;
            h = ctx.tape.add(h, y)?;
        }

        // the contrastive path is blind to feature scale; pin it for the classifier
        if !self.blocks.is_empty() {
            h = self.out_norm.forward(ctx, h)?;
        }
        let out = ctx.tape.permute(h, &[0, 3, 1, 2])?;
        if !ctx.tape.value(out).is_finite() {
            return Err(PspError::NonFinite("encoder output".into()));
        }
        Ok(out)
    }
}
