//! SGD with Nesterov momentum and the warmup/step learning-rate schedule.

use crate::error::{PspError, Result};
use crate::nn::{ParamId, ParamStore};

/// One Nesterov update in place:
/// `d = g + wd*p; v = mu*v + d; p -= lr * (d + mu*v)`.
pub fn nesterov_update(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(PspError::shape("sgd_nesterov_step", &[param.len()], &[grad.len(), velocity.len()]));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let d = g + weight_decay * *p;
        *v = momentum * *v + d;
        *p -= lr * (d + momentum * *v);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SgdNesterov {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-parameter velocity, indexed like the store; `None` until first update.
    velocity: Vec<Option<Vec<f64>>>,
}

impl SgdNesterov {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(PspError::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if weight_decay < 0.0 {
            return Err(PspError::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(SgdNesterov {
            momentum,
            weight_decay,
            velocity: vec![None; store.len()],
        })
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity[id.index()].as_deref()
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Vec<f64>) {
        self.velocity[id.index()] = Some(v);
    }

    /// Updates every trainable parameter that carries a gradient, then clears
    /// the gradients. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(PspError::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        for id in store.trainable_ids() {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let n = t.numel();
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![0.0; n]);
            nesterov_update(t.data_mut(), &g, v, lr, self.momentum, self.weight_decay)?;
            t.zero_grad();
        }
        Ok(())
    }
}

/// Schedule parameters shared with the training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub drop_epochs: Vec<usize>,
}

impl LrSchedule {
    /// Linear per-step warmup to `base_lr` over `warmup_epochs`, then division
    /// by 10 at each drop epoch.
    pub fn rate(&self, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
        let spe = steps_per_epoch.max(1);
        let warm_steps = self.warmup_epochs * spe;
        let global = epoch * spe + step_in_epoch;
        let mut lr = if global < warm_steps {
            self.base_lr * (global + 1) as f64 / warm_steps as f64
        } else {
            self.base_lr
        };
        for _ in self.drop_epochs.iter().filter(|&&d| d <= epoch) {
            lr /= 10.0;
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_and_zero_grad() {
        let mut p = [1.0];
        let mut v = [0.0];
        nesterov_update(&mut p, &[2.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);

        let mut p = [1.5, -2.0];
        let mut v = [0.0, 0.0];
        nesterov_update(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, [1.5, -2.0]);

        let mut v_bad = [0.0];
        assert!(nesterov_update(&mut p, &[0.0, 0.0], &mut v_bad, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let (lr, mu, g) = (0.1, 0.9, 1.0);
        let mut p = [0.0];
        let mut v = [0.0];
        nesterov_update(&mut p, &[g], &mut v, lr, mu, 0.0).unwrap();
        nesterov_update(&mut p, &[g], &mut v, lr, mu, 0.0).unwrap();
        // v1 = 1, p1 = -0.1*(1 + 0.9) = -0.19
        // v2 = 1.9, p2 = -0.19 - 0.1*(1 + 1.71) = -0.461
        assert!((v[0] - 1.9).abs() < 1e-12);
        assert!((p[0] + 0.461).abs() < 1e-12);
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule {
            base_lr: 0.05,
            warmup_epochs: 5,
            drop_epochs: vec![60, 90],
        };
        assert!(s.rate(0, 0, 100) < 0.05 * 0.01);
        assert_eq!(s.rate(5, 0, 100), 0.05);
        assert!((s.rate(75, 3, 100) - 0.005).abs() < 1e-15);
        assert!((s.rate(95, 0, 100) - 0.0005).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 5..120 {
            let r = s.rate(e, 0, 10);
            assert!(r <= prev);
            prev = r;
        }
    }
}
