use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{PspError, Result};
use crate::rng::RngState;
use crate::skeleton::{PyramidSpec, SkeletonSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    pub classes: usize,
    pub per_class: usize,
    /// Raw sequence length before fixed-length sampling.
    pub frames: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Base oscillation amplitude.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    0.3
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            classes: 4,
            per_class: 50,
            frames: 64,
            noise_sigma: 0.05,
            seed: 0,
            amplitude: default_amplitude(),
        }
    }
}

/// Rest pose: bodies fan out around the origin, parts step outward along
/// their body's direction, joints step along the part.
pub fn rest_pose(spec: &PyramidSpec) -> Vec<[f64; 3]> {
    let b_count = spec.n_bodies() as f64;
    let mut part_rank = vec![0usize; spec.n_parts()];
    let mut seen = vec![0usize; spec.n_bodies()];
    for (p, &b) in spec.part_to_body.iter().enumerate() {
        part_rank[p] = seen[b];
        seen[b] += 1;
    }
    let mut joint_rank = vec![0usize; spec.n_joints()];
    let mut seen = vec![0usize; spec.n_parts()];
    for (j, &p) in spec.joint_to_part.iter().enumerate() {
        joint_rank[j] = seen[p];
        seen[p] += 1;
    }
    (0..spec.n_joints())
        .map(|j| {
            let p = spec.joint_to_part[j];
            let b = spec.part_to_body[p];
            let theta = 2.0 * PI * b as f64 / b_count;
            let r = 0.3 + 0.4 * part_rank[p] as f64 + 0.1 * joint_rank[j] as f64;
            [r * theta.cos(), r * theta.sin(), 0.05 * joint_rank[j] as f64]
        })
        .collect()
}

/// Oscillating body group, cycles per sequence, phase and direction of class `c`.
fn class_motion(c: usize, classes: usize, bodies: usize) -> (usize, f64, f64, [f64; 3]) {
    let group = c % bodies;
    let freq = 1.0 + (c / bodies) as f64;
    let phase = PI * c as f64 / classes as f64;
    let psi = PI * c as f64 / classes as f64;
    (group, freq, phase, [psi.cos(), psi.sin(), 0.5])
}

/// Class-dependent sinusoidal trajectories plus Gaussian noise.
///
/// Class `c` oscillates body group `c mod B` at `1 + c / B` cycles per
/// sequence; distal parts of the group swing further. Each sample draws an
/// amplitude factor in [0.8, 1.2] and a small phase offset.
pub fn synth_generate(opts: &SynthOptions, spec: &PyramidSpec) -> Result<Vec<SkeletonSequence>> {
    if opts.classes < 2 || opts.per_class < 1 || opts.frames < 1 {
        return Err(PspError::Invalid(format!(
            "synth needs classes >= 2, per_class >= 1, frames >= 1 (got {}, {}, {})",
            opts.classes, opts.per_class, opts.frames
        )));
    }
    if !(opts.noise_sigma >= 0.0 && opts.noise_sigma.is_finite()) {
        return Err(PspError::Invalid(format!("noise sigma must be >= 0, got {}", opts.noise_sigma)));
    }
    spec.validate()?;
    let rest = rest_pose(spec);
    let bodies = spec.n_bodies();
    let joint_to_body = spec.joint_to_body();
    let mut reach = vec![0.0; spec.n_joints()];
    for (j, r) in reach.iter_mut().enumerate() {
        let p = rest[j];
        *r = (p[0] * p[0] + p[1] * p[1]).sqrt();
    }

    let mut rng = RngState::new(opts.seed);
    let mut out = Vec::with_capacity(opts.classes * opts.per_class);
    for c in 0..opts.classes {
        let (group, freq, phase, dir) = class_motion(c, opts.classes, bodies);
        for i in 0..opts.per_class {
            let amp = opts.amplitude * rng.uniform(0.8, 1.2);
            let ph = phase + rng.uniform(-0.3, 0.3);
            let frames = (0..opts.frames)
                .map(|t| {
                    let s = (2.0 * PI * freq * t as f64 / opts.frames as f64 + ph).sin();
                    let joints = (0..spec.n_joints())
                        .map(|j| {
                            let w = if joint_to_body[j] == group { amp * reach[j] * s } else { 0.0 };
                            let mut p = rest[j];
                            for k in 0..3 {
                                p[k] += w * dir[k] + rng.normal(0.0, opts.noise_sigma);
                            }
                            p
                        })
                        .collect();
                    vec![joints]
                })
                .collect();
            out.push(SkeletonSequence {
                id: format!("c{c:02}_{i:04}"),
                label: Some(c),
                n_joints: spec.n_joints(),
                frames,
            });
        }
    }
    Ok(out)
}
