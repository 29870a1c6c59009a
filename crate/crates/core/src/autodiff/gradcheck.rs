//! Central-difference gradient verification in 64-bit precision.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_err: f64,
    /// (input or parameter index, flat entry) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn record(&mut self, slot: (usize, usize), analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some(slot);
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Usage("grad_check needs a scalar-valued function".into()));
    }
    Ok(g.value(out).item())
}

/// Compares reverse-mode gradients of scalar `f` against central differences
/// for every entry of every input. Returns the maximum relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    Ok(grad_check_entries(f, inputs, step, &entries)?.max_rel_err)
}

/// Like [`grad_check`] but restricted to the listed `(input, entry)` pairs.
pub fn grad_check_entries<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    entries: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Usage(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, e) in entries {
        let analytic = grads.wrt(vars[i]).map_or(0.0, |t| t.data()[e]);
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + step;
        let up = eval_scalar(&f, &work)?;
        work[i].data_mut()[e] = orig - step;
        let down = eval_scalar(&f, &work)?;
        work[i].data_mut()[e] = orig;
        report.record((i, e), analytic, (up - down) / (2.0 * step));
    }
    Ok(report)
}

/// Checks parameter gradients of a model loss. `loss` builds the forward pass
/// from the store; entries are `(parameter, flat index)` pairs.
pub fn param_grad_check<F>(
    store: &ParamStore<f64>,
    loss: F,
    step: f64,
    entries: &[(ParamId, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; store.len()];
    for (id, t) in grads.param_grads() {
        match &mut analytic[id.index()] {
            Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
            slot => *slot = Some(t.clone()),
        }
    }
    drop(g);
    let mut work = store.clone();
    let mut report = GradCheckReport::new();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, s)?;
        Ok(g.value(out).item())
    };
    for &(id, e) in entries {
        let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[e]);
        let orig = work.get(id).value.data()[e];
        work.get_mut(id).value.data_mut()[e] = orig + step;
        let up = eval(&work)?;
        work.get_mut(id).value.data_mut()[e] = orig - step;
        let down = eval(&work)?;
        work.get_mut(id).value.data_mut()[e] = orig;
        report.record((id.index(), e), a, (up - down) / (2.0 * step));
    }
    Ok(report)
}
