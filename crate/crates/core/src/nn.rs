//! Parameter storage, the per-forward tape context, and small layers.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{PspError, Result};
use crate::rng::RngState;
use crate::tensor::tape::{BatchStats, NormStats};
use crate::tensor::{Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
    /// Batch statistics without dropout, for re-estimating running statistics.
    Calibrate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Non-trainable entries (running statistics) are never touched by the optimizer.
    pub trainable: bool,
}

/// Named, ordered collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            tensor: tensor.with_requires_grad(trainable),
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.entries[id.0].trainable).collect()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Replaces the value of `name`, keeping shape and flags.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| PspError::Invalid(format!("unknown parameter {name}")))?;
        let cur = &mut self.entries[id.0].tensor;
        if cur.shape() != value.shape() {
            return Err(PspError::shape("set_value", cur.shape(), value.shape()));
        }
        cur.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            self.entries[id.0].tensor.accumulate_grad(g);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Sets each touched running mean and variance to the plain average of
    /// its batch statistics across `passes`.
    pub fn set_running_stats(&mut self, passes: &[Vec<StatUpdate>]) {
        let mut sums: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for u in passes.iter().flatten() {
            let e = sums
                .entry((u.running_mean.0, u.running_var.0))
                .or_insert_with(|| (vec![0.0; u.stats.mean.len()], vec![0.0; u.stats.var.len()], 0));
            e.0.iter_mut().zip(&u.stats.mean).for_each(|(a, b)| *a += b);
            e.1.iter_mut().zip(&u.stats.var).for_each(|(a, b)| *a += b);
            e.2 += 1;
        }
        for ((mi, vi), (mean, var, n)) in sums {
            let n = n as f64;
            for (r, s) in self.entries[mi].tensor.data_mut().iter_mut().zip(&mean) {
                *r = s / n;
            }
            for (r, s) in self.entries[vi].tensor.data_mut().iter_mut().zip(&var) {
                *r = s / n;
            }
        }
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.entries[u.running_mean.0].tensor.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.entries[u.running_var.0].tensor.data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
    pub momentum: f64,
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: Option<&'a mut RngState>,
    stat_updates: Vec<StatUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            rng: None,
            stat_updates: Vec::new(),
        }
    }

    pub fn with_rng(mut self, rng: &'a mut RngState) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Tape variable for a stored parameter, bound once per forward.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = if e.trainable {
            self.tape.param(e.tensor.clone())
        } else {
            self.tape.constant(e.tensor.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode != Mode::Train || rate <= 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| PspError::Config("dropout in train mode needs an rng".into()))?;
        let shape = self.tape.shape(x).to_vec();
        let keep = 1.0 - rate;
        let mut mask = Tensor::zeros(&shape);
        for v in mask.data_mut() {
            *v = if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 };
        }
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }

    pub fn push_stat_update(&mut self, u: StatUpdate) {
        self.stat_updates.push(u);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.entries[i].trainable {
                    return None;
                }
                Some((ParamId(i), self.tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| {
                    vec![0.0; self.store.entries[i].tensor.numel()]
                })))
            })
            .collect()
    }
}

/// Uniform fan-in bound used by every weight initializer: `sqrt(6 / fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights `U(-g*sqrt(6/d_in), g*sqrt(6/d_in))` with `0 < gain <= 1`; zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut RngState,
    ) -> Self {
        debug_assert!(gain > 0.0 && gain <= 1.0);
        let w = rng.uniform_tensor(&[d_in, d_out], gain * fan_in_bound(d_in));
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.linear(x, w, b)
    }
}

/// Batch norm over every axis but the last.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[features]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[features]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[features]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[features]), false),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        match ctx.mode() {
            Mode::Train | Mode::Calibrate => {
                let (y, stats) = ctx.tape.batch_norm(x, g, b, self.eps, NormStats::Batch)?;
                if let Some(stats) = stats {
                    ctx.push_stat_update(StatUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        stats,
                        momentum: self.momentum,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store();
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                let (y, _) = ctx.tape.batch_norm(x, g, b, self.eps, NormStats::Fixed { mean: &mean, var: &var })?;
                Ok(y)
            }
        }
    }
}
