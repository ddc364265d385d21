//! Raw numeric kernels.
//!
//! Every output element is produced by exactly one sequential loop with a
//! fixed summation order, so the parallel and sequential paths are bitwise
//! identical regardless of worker count.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Turns the parallel paths off (or back on) at runtime. Has no effect when
/// the `parallel` feature is off. Results do not depend on this switch.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

/// Whether the parallel paths are compiled in and switched on.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Work (multiply-adds) below which the parallel path is not worth dispatching.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 16;

/// Geometry of a batched matmul: `batches[i]` gives the matrix index into
/// `a` and `b` for output matrix `i`.
#[derive(Clone, Debug)]
pub struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batches: Vec<(usize, usize)>,
}

impl MatmulPlan {
    pub fn single(m: usize, k: usize, n: usize) -> Self {
        MatmulPlan {
            m,
            k,
            n,
            batches: vec![(0, 0)],
        }
    }

    pub fn out_len(&self) -> usize {
        self.batches.len() * self.m * self.n
    }

    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    fn work(&self) -> usize {
        self.batches.len() * self.m * self.k * self.n
    }
}

#[inline]
fn row_kernel(plan: &MatmulPlan, a: &[f64], b: &[f64], row: usize, out: &mut [f64]) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let (ab, bb) = plan.batches[row / m];
    let i = row % m;
    let a_row = &a[ab * m * k + i * k..ab * m * k + (i + 1) * k];
    let b_mat = &b[bb * k * n..(bb + 1) * k * n];
    out.iter_mut().for_each(|v| *v = 0.0);
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b_mat[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

pub fn matmul_seq(plan: &MatmulPlan, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; plan.out_len()];
    if plan.n == 0 {
        return out;
    }
    for (row, chunk) in out.chunks_mut(plan.n).enumerate() {
        row_kernel(plan, a, b, row, chunk);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(plan: &MatmulPlan, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; plan.out_len()];
    out.par_chunks_mut(plan.n)
        .enumerate()
        .for_each(|(row, chunk)| row_kernel(plan, a, b, row, chunk));
    out
}

/// Batched matmul, parallel over output rows when the `parallel` feature is on
/// and the problem is large enough.
pub fn matmul(plan: &MatmulPlan, a: &[f64], b: &[f64]) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && plan.work() >= PAR_THRESHOLD && plan.out_len() >= 2 * plan.n {
            return matmul_par(plan, a, b);
        }
    }
    matmul_seq(plan, a, b)
}

/// Transposes the trailing two axes of a stack of `count` `rows x cols` matrices.
pub fn transpose_last2(data: &[f64], count: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for c in 0..count {
        let base = c * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = data[base + i * cols + j];
            }
        }
    }
    out
}

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is enabled
/// and switched on.
/// Results are returned in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
