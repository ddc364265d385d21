//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value. Nodes are
//! appended only after their inputs, so the tape is always in topological
//! order and `backward` is a single reverse sweep.

use super::kernels::{self, MatmulPlan};
use super::shape::{broadcast_map, broadcast_shapes, permute_map, reduce_plan, reduce_to_shape, strides};
use super::Tensor;
use crate::error::{PspError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Tanh,
    LeakyRelu(f64),
    Exp,
    Log,
    Sqrt,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinKind, Var, Var),
    Unary(UnaryKind, Var),
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
        a_count: usize,
        b_count: usize,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        map: Vec<usize>,
        count: usize,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        axis: usize,
        segment_of: Vec<usize>,
        counts: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
    LogSumExp {
        x: Var,
        softmax: Vec<f64>,
    },
    TemporalConv {
        x: Var,
        w: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one row is present).
    pub var: Vec<f64>,
}

/// Either batch statistics (train) or fixed running statistics (eval).
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    Batch,
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.zero_grad();
        self.push(t, Op::Leaf, &[])
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears every gradient and re-arms the tape for another backward pass.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
        self.spent = false;
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let op_name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb).ok_or_else(|| PspError::shape(op_name, &sa, &sb))?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        if kind == BinKind::Div && xb.iter().any(|&v| v == 0.0) {
            return Err(PspError::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let data: Vec<f64> = if sa == sb {
            xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, &sa);
            let mb = broadcast_map(&out_shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(xa[i], xb[j])).collect()
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xs = self.value(x);
        match kind {
            UnaryKind::Log if xs.data().iter().any(|&v| v <= 0.0) => {
                return Err(PspError::Domain {
                    op: "log",
                    msg: "input must be strictly positive".into(),
                })
            }
            UnaryKind::Sqrt if xs.data().iter().any(|&v| v < 0.0) => {
                return Err(PspError::Domain {
                    op: "sqrt",
                    msg: "input must be non-negative".into(),
                })
            }
            _ => {}
        }
        let data: Vec<f64> = xs
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::LeakyRelu(s) => {
                    if v > 0.0 {
                        v
                    } else {
                        s * v
                    }
                }
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Scale(c) => c * v,
            })
            .collect();
        let t = Tensor::from_parts(xs.shape().to_vec(), data);
        Ok(self.push(t, Op::Unary(kind, x), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }

    // ---- matmul / linear ---------------------------------------------------

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]` with
    /// broadcast leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(PspError::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let out_batch = broadcast_shapes(ba, bb).ok_or_else(|| PspError::shape("matmul", &sa, &sb))?;
        let amap = broadcast_map(&out_batch, ba);
        let bmap = broadcast_map(&out_batch, bb);
        let plan = MatmulPlan {
            m,
            k,
            n,
            batches: amap.into_iter().zip(bmap).collect(),
        };
        let data = kernels::matmul(&plan, self.value(a).data(), self.value(b).data());
        let mut shape = out_batch;
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            plan,
            a_count: ba.iter().product(),
            b_count: bb.iter().product(),
        };
        Ok(self.push(Tensor::from_parts(shape, data), op, &[a, b]))
    }

    /// Affine map over the trailing dimension: `x[..., d_in] W[d_in, d_out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] {
            return Err(PspError::shape("linear", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return Err(PspError::shape("linear", &sw, self.shape(b)));
            }
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let x2 = self.reshape(x, &[rows, sw[0]])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        out_shape.push(sw[1]);
        self.reshape(y, &out_shape)
    }

    // ---- reductions --------------------------------------------------------

    fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
        };
        let (out_shape, map, count) = reduce_plan(name, self.shape(x), axes)?;
        let mut data = vec![0.0; out_shape.iter().product()];
        for (v, &o) in self.value(x).data().iter().zip(&map) {
            data[o] += v;
        }
        if kind == ReduceKind::Mean {
            let c = count as f64;
            data.iter_mut().for_each(|v| *v /= c);
        }
        let op = Op::Reduce { kind, x, map, count };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, &[x]))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes)
    }

    /// Max over `axes`; ties resolve to the lowest flat index.
    pub fn max(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (out_shape, map, _) = reduce_plan("max", self.shape(x), axes)?;
        let n_out: usize = out_shape.iter().product();
        let mut data = vec![f64::NEG_INFINITY; n_out];
        let mut argmax = vec![usize::MAX; n_out];
        for (i, (&v, &o)) in self.value(x).data().iter().zip(&map).enumerate() {
            if argmax[o] == usize::MAX || v > data[o] {
                data[o] = v;
                argmax[o] = i;
            }
        }
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Max { x, argmax }, &[x]))
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let to_len: usize = shape.iter().product();
        if to_len != src.numel() || shape.iter().any(|&d| d == 0) {
            return Err(PspError::ElementCount {
                from: src.shape().to_vec(),
                from_len: src.numel(),
                to: shape.to_vec(),
                to_len,
            });
        }
        let t = Tensor::from_parts(shape.to_vec(), src.data().to_vec());
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if order.len() != rank || order.iter().any(|&o| o >= rank || std::mem::replace(&mut seen[o], true)) {
            return Err(PspError::Invalid(format!(
                "permute: {order:?} is not a permutation of rank {rank}"
            )));
        }
        let map = permute_map(&shape, order);
        let src = self.value(x).data();
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = order.iter().map(|&o| shape[o]).collect();
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute { x, map }, &[x]))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(PspError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.swap(r - 2, r - 1);
        self.permute(x, &order)
    }

    /// Gathers `indices` along `axis` (pure index expansion).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(PspError::InvalidAxis {
                op: "index_select",
                axis,
                rank: shape.len(),
            });
        }
        let dim = shape[axis];
        if indices.is_empty() {
            return Err(PspError::Invalid("index_select: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(PspError::Invalid(format!(
                "index_select: index {bad} out of range for axis of size {dim}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * dim + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let op = Op::IndexSelect {
            x,
            axis,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, &[x]))
    }

    /// Averages groups of positions along `axis`: output position `s` is the
    /// mean over input positions `i` with `segment_of[i] == s`.
    pub fn segment_mean(&mut self, x: Var, axis: usize, segment_of: &[usize], n_segments: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(PspError::InvalidAxis {
                op: "segment_mean",
                axis,
                rank: shape.len(),
            });
        }
        let dim = shape[axis];
        if segment_of.len() != dim {
            return Err(PspError::shape("segment_mean", &shape, &[segment_of.len()]));
        }
        let mut counts = vec![0usize; n_segments];
        for &s in segment_of {
            if s >= n_segments {
                return Err(PspError::Invalid(format!(
                    "segment_mean: segment {s} out of range {n_segments}"
                )));
            }
            counts[s] += 1;
        }
        if counts.contains(&0) {
            return Err(PspError::Invalid("segment_mean: empty segment".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * n_segments * inner];
        for o in 0..outer {
            for (i, &s) in segment_of.iter().enumerate() {
                let sb = (o * dim + i) * inner;
                let db = (o * n_segments + s) * inner;
                for q in 0..inner {
                    data[db + q] += src[sb + q];
                }
            }
            for (s, &c) in counts.iter().enumerate() {
                let db = (o * n_segments + s) * inner;
                data[db..db + inner].iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = n_segments;
        let op = Op::SegmentMean {
            x,
            axis,
            segment_of: segment_of.to_vec(),
            counts,
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(inputs.first().ok_or_else(|| PspError::Invalid("concat: no inputs".into()))?.0)
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default();
        if axis >= first.len() {
            return Err(PspError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(PspError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, inputs))
    }

    // ---- fused nn ops ------------------------------------------------------

    /// Batch normalization over every axis but the last. Returns the output and,
    /// in batch mode, the batch statistics for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        if eps <= 0.0 {
            return Err(PspError::Domain {
                op: "batch_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let shape = self.shape(x).to_vec();
        let f = *shape.last().ok_or_else(|| PspError::shape("batch_norm", &shape, &[]))?;
        for p in [gamma, beta] {
            if self.shape(p) != [f] {
                return Err(PspError::shape("batch_norm", &shape, self.shape(p)));
            }
        }
        let xs = self.value(x).data();
        let rows = xs.len() / f;
        if rows == 0 {
            return Err(PspError::Invalid("batch_norm: zero-size normalization group".into()));
        }
        let (mean, var_biased, out_stats, train) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; f];
                for r in 0..rows {
                    for j in 0..f {
                        mean[j] += xs[r * f + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; f];
                for r in 0..rows {
                    for j in 0..f {
                        let d = xs[r * f + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                let unbiased: Vec<f64> = if rows > 1 {
                    var.iter().map(|v| v / (rows - 1) as f64).collect()
                } else {
                    var.clone()
                };
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let bs = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(bs), true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(PspError::shape("batch_norm", &[f], &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            for j in 0..f {
                let i = r * f + j;
                xhat[i] = (xs[i] - mean[j]) * inv_std[j];
                out[i] = g[j] * xhat[i] + b[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        let v = self.push(Tensor::from_parts(shape, out), op, &[x, gamma, beta]);
        Ok((v, out_stats))
    }

    /// Mean over rows of `-log softmax(logits)[true class]`, stabilized by max
    /// subtraction. `targets` must be one-hot rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.shape() != shape.as_slice() {
            return Err(PspError::shape("softmax_cross_entropy", &shape, targets.shape()));
        }
        let (m, k) = (shape[0], shape[1]);
        if k < 2 {
            return Err(PspError::Invalid("softmax_cross_entropy: need at least 2 classes".into()));
        }
        let y = targets.data();
        for r in 0..m {
            let row = &y[r * k..(r + 1) * k];
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(PspError::Invalid(format!("malformed one-hot target row {r}: {row:?}")));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; m * k];
        let mut loss = 0.0;
        for r in 0..m {
            let row = &z[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + se.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - mx).exp() / se;
                if y[r * k + j] == 1.0 {
                    loss += lse - row[j];
                }
            }
        }
        let op = Op::SoftmaxCe {
            logits,
            probs,
            targets: y.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss / m as f64), op, &[logits]))
    }

    /// `log(sum(exp(x)))` over the last axis, stabilized by max subtraction.
    /// Entries equal to `-inf` contribute nothing.
    pub fn logsumexp_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| PspError::shape("logsumexp", &shape, &[]))?;
        let src = self.value(x).data();
        let rows = src.len() / k;
        let mut out = vec![0.0; rows];
        let mut softmax = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(PspError::Domain {
                    op: "logsumexp",
                    msg: format!("row {r} has no finite maximum"),
                });
            }
            let se: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            out[r] = mx + se.ln();
            for j in 0..k {
                softmax[r * k + j] = (row[j] - mx).exp() / se;
            }
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::LogSumExp { x, softmax }, &[x]))
    }

    /// Depthwise convolution along axis 1 of `x[M, T, N, C]` with kernel
    /// `w[K, C]` (K odd), zero padded so the output keeps length T.
    pub fn temporal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 2 || sw[1] != sx[3] || sw[0] % 2 == 0 {
            return Err(PspError::shape("temporal_conv", &sx, &sw));
        }
        let (m, t, n, c) = (sx[0], sx[1], sx[2], sx[3]);
        let kk = sw[0];
        let pad = kk / 2;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; xs.len()];
        for mi in 0..m {
            for ti in 0..t {
                for k in 0..kk {
                    let src_t = ti as isize + k as isize - pad as isize;
                    if src_t < 0 || src_t >= t as isize {
                        continue;
                    }
                    let src_t = src_t as usize;
                    for ni in 0..n {
                        let ob = ((mi * t + ti) * n + ni) * c;
                        let sb = ((mi * t + src_t) * n + ni) * c;
                        for ci in 0..c {
                            out[ob + ci] += ws[k * c + ci] * xs[sb + ci];
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::from_parts(sx, out), Op::TemporalConv { x, w }, &[x, w]))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates gradients from the scalar `loss` to every node that needs them.
    /// Gradients accumulate into leaves; call [`Tape::zero_grad`] before reuse.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(PspError::TapeExhausted);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(PspError::NotScalar(lv.shape().to_vec()));
        }
        self.spent = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            let contributions = self.input_grads(idx, &g);
            self.nodes[idx].value.grad = Some(g);
            for (v, cg) in contributions {
                if self.nodes[v.0].needs_grad {
                    self.nodes[v.0].value.accumulate_grad(&cg);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn input_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ma = broadcast_map(out_shape, ta.shape());
                let mb = broadcast_map(out_shape, tb.shape());
                let (xa, xb) = (ta.data(), tb.data());
                if self.needs(*a) {
                    let full: Vec<f64> = match kind {
                        BinKind::Add | BinKind::Sub => g.to_vec(),
                        BinKind::Mul => g.iter().zip(&mb).map(|(gi, &j)| gi * xb[j]).collect(),
                        BinKind::Div => g.iter().zip(&mb).map(|(gi, &j)| gi / xb[j]).collect(),
                    };
                    res.push((*a, reduce_to_shape(&full, out_shape, ta.shape())));
                }
                if self.needs(*b) {
                    let full: Vec<f64> = match kind {
                        BinKind::Add => g.to_vec(),
                        BinKind::Sub => g.iter().map(|v| -v).collect(),
                        BinKind::Mul => g.iter().zip(&ma).map(|(gi, &i)| gi * xa[i]).collect(),
                        BinKind::Div => g
                            .iter()
                            .zip(ma.iter().zip(&mb))
                            .map(|(gi, (&i, &j))| -gi * xa[i] / (xb[j] * xb[j]))
                            .collect(),
                    };
                    res.push((*b, reduce_to_shape(&full, out_shape, tb.shape())));
                }
            }
            Op::Unary(kind, x) => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let gx: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        gi * match kind {
                            UnaryKind::Tanh => 1.0 - ys[i] * ys[i],
                            UnaryKind::LeakyRelu(s) => {
                                if xs[i] > 0.0 {
                                    1.0
                                } else {
                                    *s
                                }
                            }
                            UnaryKind::Exp => ys[i],
                            UnaryKind::Log => 1.0 / xs[i],
                            UnaryKind::Sqrt => 0.5 / ys[i],
                            UnaryKind::Scale(c) => *c,
                        }
                    })
                    .collect();
                res.push((*x, gx));
            }
            Op::MatMul {
                a,
                b,
                plan,
                a_count,
                b_count,
            } => {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.needs(*a) {
                    // dA = dC . B^T
                    let bt = kernels::transpose_last2(self.value(*b).data(), *b_count, k, n);
                    let p = MatmulPlan {
                        m,
                        k: n,
                        n: k,
                        batches: plan.batches.iter().enumerate().map(|(i, &(_, bj))| (i, bj)).collect(),
                    };
                    let full = kernels::matmul(&p, g, &bt);
                    let mut ga = vec![0.0; a_count * m * k];
                    for (i, &(ai, _)) in plan.batches.iter().enumerate() {
                        let src = &full[i * m * k..(i + 1) * m * k];
                        let dst = &mut ga[ai * m * k..(ai + 1) * m * k];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    // dB = A^T . dC
                    let at = kernels::transpose_last2(self.value(*a).data(), *a_count, m, k);
                    let p = MatmulPlan {
                        m: k,
                        k: m,
                        n,
                        batches: plan.batches.iter().enumerate().map(|(i, &(ai, _))| (ai, i)).collect(),
                    };
                    let full = kernels::matmul(&p, &at, g);
                    let mut gb = vec![0.0; b_count * k * n];
                    for (i, &(_, bj)) in plan.batches.iter().enumerate() {
                        let src = &full[i * k * n..(i + 1) * k * n];
                        let dst = &mut gb[bj * k * n..(bj + 1) * k * n];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Reduce { kind, x, map, count } => {
                let scale = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => 1.0 / *count as f64,
                };
                res.push((*x, map.iter().map(|&o| g[o] * scale).collect()));
            }
            Op::Max { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += g[o];
                }
                res.push((*x, gx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Permute { x, map } => {
                let mut gx = vec![0.0; g.len()];
                for (j, &i) in map.iter().enumerate() {
                    gx[i] += g[j];
                }
                res.push((*x, gx));
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = self.value(*x).shape();
                let dim = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut gx = vec![0.0; outer * dim * inner];
                let mut gi = 0;
                for o in 0..outer {
                    for &i in indices {
                        let base = (o * dim + i) * inner;
                        for q in 0..inner {
                            gx[base + q] += g[gi];
                            gi += 1;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::SegmentMean {
                x,
                axis,
                segment_of,
                counts,
            } => {
                let shape = self.value(*x).shape();
                let dim = shape[*axis];
                let ns = counts.len();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut gx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for (i, &s) in segment_of.iter().enumerate() {
                        let c = counts[s] as f64;
                        for q in 0..inner {
                            gx[(o * dim + i) * inner + q] = g[(o * ns + s) * inner + q] / c;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::Concat { inputs, axis } => {
                let shape = out_shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let d = self.value(v).shape()[*axis];
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[start..start + d * inner]);
                        }
                        res.push((v, gv));
                    }
                    offset += d;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let f = inv_std.len();
                let rows = g.len() / f;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for r in 0..rows {
                    for j in 0..f {
                        dgamma[j] += g[r * f + j] * xhat[r * f + j];
                        dbeta[j] += g[r * f + j];
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    if *train {
                        let rn = rows as f64;
                        for r in 0..rows {
                            for j in 0..f {
                                let i = r * f + j;
                                // sum(dxhat) = gamma*dbeta, sum(dxhat*xhat) = gamma*dgamma
                                gx[i] = gam[j] * inv_std[j] / rn
                                    * (rn * g[i] - dbeta[j] - xhat[i] * dgamma[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..f {
                                gx[r * f + j] = g[r * f + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                res.push((*gamma, dgamma));
                res.push((*beta, dbeta));
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
            } => {
                let m = self.value(*logits).shape()[0] as f64;
                let s = g[0] / m;
                res.push((*logits, probs.iter().zip(targets).map(|(p, y)| (p - y) * s).collect()));
            }
            Op::LogSumExp { x, softmax } => {
                let k = self.value(*x).shape().last().copied().unwrap_or(1);
                res.push((*x, softmax.iter().enumerate().map(|(i, p)| p * g[i / k]).collect()));
            }
            Op::TemporalConv { x, w } => {
                let sx = self.value(*x).shape();
                let (m, t, n, c) = (sx[0], sx[1], sx[2], sx[3]);
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let kk = ws.len() / c;
                let pad = kk / 2;
                let mut gx = vec![0.0; xs.len()];
                let mut gw = vec![0.0; ws.len()];
                for mi in 0..m {
                    for ti in 0..t {
                        for k in 0..kk {
                            let src_t = ti as isize + k as isize - pad as isize;
                            if src_t < 0 || src_t >= t as isize {
                                continue;
                            }
                            let src_t = src_t as usize;
                            for ni in 0..n {
                                let ob = ((mi * t + ti) * n + ni) * c;
                                let sb = ((mi * t + src_t) * n + ni) * c;
                                for ci in 0..c {
                                    gx[sb + ci] += ws[k * c + ci] * g[ob + ci];
                                    gw[k * c + ci] += xs[sb + ci] * g[ob + ci];
                                }
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    res.push((*x, gx));
                }
                res.push((*w, gw));
            }
        }
        res
    }
}

/// Row-major flat index helper used by tests and callers building constants.
pub fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    strides(shape).iter().zip(index).map(|(s, i)| s * i).sum()
}
