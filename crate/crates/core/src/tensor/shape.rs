use crate::error::{PspError, Result};

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, aligned from the right.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// For every flat index of `out_shape`, the flat index of the broadcast
/// source with shape `in_shape`.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides(in_shape);
    // stride 0 on broadcast axes
    let eff: Vec<usize> = (0..rank)
        .map(|d| {
            if d < pad || in_shape[d - pad] == 1 {
                0
            } else {
                in_strides[d - pad]
            }
        })
        .collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Sums a gradient of shape `out_shape` down to a broadcast source of shape `in_shape`.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let map = broadcast_map(out_shape, in_shape);
    let mut res = vec![0.0; in_shape.iter().product()];
    for (g, &m) in grad.iter().zip(&map) {
        res[m] += g;
    }
    res
}

/// Validates reduction axes and returns (output shape, out-index map per input element, count per output).
pub(crate) fn reduce_plan(
    op: &'static str,
    shape: &[usize],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(PspError::InvalidAxis { op, axis: a, rank });
        }
        seen[a] = true;
    }
    let out_shape: Vec<usize> = (0..rank).filter(|d| !seen[*d]).map(|d| shape[d]).collect();
    let out_strides_full: Vec<usize> = {
        let os = strides(&out_shape);
        let mut k = 0;
        (0..rank)
            .map(|d| {
                if seen[d] {
                    0
                } else {
                    k += 1;
                    os[k - 1]
                }
            })
            .collect()
    };
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += out_strides_full[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= out_strides_full[d] * idx[d];
            idx[d] = 0;
        }
    }
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    Ok((out_shape, map, count))
}

/// Flat source index for each output element of a permutation.
pub(crate) fn permute_map(shape: &[usize], order: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&o| shape[o]).collect();
    let eff: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}
