//! Central finite-difference checks of analytic gradients.
//!
//! The relative error of one coordinate is `|a - n| / max(|a|, |n|, floor)`.
//! The floor keeps coordinates whose true gradient is near zero from being
//! judged on finite-difference round-off alone.

use crate::error::Result;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::kernels::map_indexed;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn absorb(&mut self, name: &str, idx: usize, a: f64, n: f64, floor: f64) {
        let rel = relative_error(a, n, floor);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max((a - n).abs());
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), idx));
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Checks a tape-built scalar function of plain tensors against central
/// differences for every input coordinate.
pub fn check_tensor_fn<F>(inputs: &[Tensor], step: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            report.absorb(&format!("input{k}"), i, grads[i], numeric, floor);
        }
    }
    Ok(report)
}

/// Checks every coordinate of `params` against central differences of `loss`.
///
/// `analytic` returns gradients for (a superset of) `params`; `loss` evaluates
/// the same objective without recording gradients. Parameters are swept in
/// parallel when the `parallel` feature is enabled; each worker perturbs a
/// private copy of the store.
pub fn check_params<L>(
    store: &ParamStore,
    params: &[ParamId],
    analytic: &[(ParamId, Vec<f64>)],
    step: f64,
    floor: f64,
    loss: L,
) -> Result<GradCheckReport>
where
    L: Fn(&ParamStore) -> Result<f64> + Sync + Send,
{
    let per_param: Vec<Result<GradCheckReport>> = map_indexed(params.len(), |k| {
        let id = params[k];
        let name = store.entry(id).name.clone();
        let zeros;
        let grad: &[f64] = match analytic.iter().find(|(pid, _)| *pid == id) {
            Some((_, g)) => g,
            None => {
                zeros = vec![0.0; store.get(id).numel()];
                &zeros
            }
        };
        let mut local = store.clone();
        let mut report = GradCheckReport::default();
        for i in 0..grad.len() {
            let orig = local.get(id).data()[i];
            local.get_mut(id).data_mut()[i] = orig + step;
            let fp = loss(&local)?;
            local.get_mut(id).data_mut()[i] = orig - step;
            let fm = loss(&local)?;
            local.get_mut(id).data_mut()[i] = orig;
            report.absorb(&name, i, grad[i], (fp - fm) / (2.0 * step), floor);
        }
        Ok(report)
    });
    let mut total = GradCheckReport::default();
    for r in per_param {
        total.merge(r?);
    }
    Ok(total)
}
