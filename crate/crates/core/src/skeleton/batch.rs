use serde::{Deserialize, Serialize};

use crate::error::{PspError, Result};
use crate::skeleton::SkeletonSequence;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    /// `x[t+1] - x[t]`, last frame zero.
    #[default]
    Forward,
    /// `(x[t+1] - x[t-1]) / 2` inside, one-sided differences at both ends.
    Central,
}

/// Frame differences along axis 2 of `[M, C, T, N]`.
pub fn to_motion(joint: &Tensor, kind: MotionKind) -> Result<Tensor> {
    let s = joint.shape();
    if s.len() != 4 {
        return Err(PspError::shape("to_motion", s, &[0, 3, 0, 0]));
    }
    let (outer, t, n) = (s[0] * s[1], s[2], s[3]);
    if t < 2 {
        return Err(PspError::Domain {
            op: "to_motion",
            msg: format!("need at least 2 frames, got {t}"),
        });
    }
    let x = joint.data();
    let mut out = Tensor::zeros(s);
    let y = out.data_mut();
    for o in 0..outer {
        let base = o * t * n;
        let at = |ti: usize, j: usize| x[base + ti * n + j];
        for ti in 0..t {
            for j in 0..n {
                y[base + ti * n + j] = match kind {
                    MotionKind::Forward if ti + 1 < t => at(ti + 1, j) - at(ti, j),
                    MotionKind::Forward => 0.0,
                    MotionKind::Central if ti == 0 => at(1, j) - at(0, j),
                    MotionKind::Central if ti == t - 1 => at(ti, j) - at(ti - 1, j),
                    MotionKind::Central => 0.5 * (at(ti + 1, j) - at(ti - 1, j)),
                };
            }
        }
    }
    Ok(out)
}

/// Source frame indices for fixed-length sampling. Shorter sequences are
/// repeated cyclically first.
pub fn sample_indices(t_raw: usize, target: usize) -> Result<Vec<usize>> {
    if t_raw == 0 {
        return Err(PspError::Domain {
            op: "sample_frames",
            msg: "sequence has no frames".into(),
        });
    }
    if target < 2 {
        return Err(PspError::Domain {
            op: "sample_frames",
            msg: format!("target length must be >= 2, got {target}"),
        });
    }
    let span = t_raw * target.div_ceil(t_raw);
    Ok((0..target).map(|i| (i * span / target) % t_raw).collect())
}

pub fn sample_frames(seq: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    let idx = sample_indices(seq.n_frames(), target)?;
    Ok(SkeletonSequence {
        id: seq.id.clone(),
        label: seq.label,
        n_joints: seq.n_joints,
        frames: idx.iter().map(|&i| seq.frames[i].clone()).collect(),
    })
}

/// Model input for M sequences.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[M, 3, T, N]`
    pub joint: Tensor,
    /// `[M, 3, T, N]`
    pub motion: Tensor,
    /// One-hot `[M, classes]` when every sequence is labeled and classes are known.
    pub labels: Option<Tensor>,
    pub label_index: Vec<Option<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Samples every sequence to `target_t` frames and stacks the first body.
    /// Labels are attached when `classes` is given and every sequence has one.
    pub fn from_sequences(
        seqs: &[&SkeletonSequence],
        target_t: usize,
        classes: Option<usize>,
        motion: MotionKind,
    ) -> Result<Batch> {
        let first = seqs
            .first()
            .ok_or_else(|| PspError::Invalid("cannot build an empty batch".into()))?;
        let n = first.n_joints;
        let m = seqs.len();
        let mut joint = Tensor::zeros(&[m, 3, target_t, n]);
        {
            let d = joint.data_mut();
            for (mi, s) in seqs.iter().enumerate() {
                if s.n_joints != n {
                    return Err(PspError::Invalid(format!(
                        "sequence {} has {} joints, batch expects {n}",
                        s.id, s.n_joints
                    )));
                }
                let idx = sample_indices(s.n_frames(), target_t)?;
                for (ti, &src) in idx.iter().enumerate() {
                    for (j, xyz) in s.frames[src][0].iter().enumerate() {
                        for (c, &v) in xyz.iter().enumerate() {
                            d[((mi * 3 + c) * target_t + ti) * n + j] = v;
                        }
                    }
                }
            }
        }
        let motion = to_motion(&joint, motion)?;
        let label_index: Vec<Option<usize>> = seqs.iter().map(|s| s.label).collect();
        let labels = match classes {
            Some(k) if label_index.iter().all(Option::is_some) => {
                let mut y = Tensor::zeros(&[m, k]);
                for (mi, l) in label_index.iter().enumerate() {
                    let l = l.expect("checked");
                    if l >= k {
                        return Err(PspError::Invalid(format!("label {l} out of range for {k} classes")));
                    }
                    y.set(&[mi, l], 1.0);
                }
                Some(y)
            }
            _ => None,
        };
        Ok(Batch {
            ids: seqs.iter().map(|s| s.id.clone()).collect(),
            joint,
            motion,
            labels,
            label_index,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn series(vals: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, vals.len(), 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn forward_difference_examples() {
        assert_eq!(to_motion(&series(&[0.0, 1.0, 3.0]), MotionKind::Forward).unwrap().data(), &[1.0, 2.0, 0.0]);
        assert!(to_motion(&series(&[2.0; 5]), MotionKind::Forward)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(to_motion(&series(&[1.0]), MotionKind::Forward).is_err());
        assert_eq!(
            to_motion(&series(&[0.0, 1.0, 3.0]), MotionKind::Central).unwrap().data(),
            &[1.0, 1.5, 2.0]
        );
    }

    #[test]
    fn telescoping_sum() {
        let mut rng = RngState::new(4);
        let x = rng.uniform_tensor(&[2, 3, 7, 4], 1.0);
        let m = to_motion(&x, MotionKind::Forward).unwrap();
        for o in 0..6 {
            for j in 0..4 {
                let s: f64 = (0..7).map(|t| m.data()[(o * 7 + t) * 4 + j]).sum();
                let want = x.data()[(o * 7 + 6) * 4 + j] - x.data()[o * 7 * 4 + j];
                assert!((s - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_indices(50, 50).unwrap(), (0..50).collect::<Vec<_>>());
        assert_eq!(sample_indices(100, 50).unwrap(), (0..50).map(|i| 2 * i).collect::<Vec<_>>());
        let short = sample_indices(25, 50).unwrap();
        for f in 0..25 {
            assert_eq!(short.iter().filter(|&&i| i == f).count(), 2);
        }
        assert_eq!(&short[..25], &(0..25).collect::<Vec<_>>()[..]);
        assert!(sample_indices(0, 50).is_err());
        assert!(sample_indices(5, 1).is_err());
    }
}
