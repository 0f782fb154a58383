//! Central finite-difference gradient verification in 64-bit.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    /// Parameter name, for checks over a store.
    pub param: Option<String>,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_index = other.worst_index;
        }
        self.failures.extend(other.failures);
    }
}

/// Compares `analytic[i]` with `(eval(i, +h) - eval(i, -h)) / 2h` for each
/// index, using `|a - n| / max(1, |n|)`.
pub fn check_gradient(
    analytic: &[f64],
    indices: &[usize],
    eval: impl FnMut(usize, f64) -> Result<f64>,
    tol: f64,
) -> Result<GradCheckReport> {
    check_gradient_step(analytic, indices, eval, tol, FD_STEP)
}

/// [`check_gradient`] with an explicit step.
pub fn check_gradient_step(
    analytic: &[f64],
    indices: &[usize],
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
    tol: f64,
    h: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for &i in indices {
        if i >= analytic.len() {
            return Err(Error::invalid(format!("grad_check index {i} out of range")));
        }
        let numeric = (eval(i, h)? - eval(i, -h)?) / (2.0 * h);
        let rel_error = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if rel_error > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel_error);
            report.worst_index = Some(i);
        }
        if !(rel_error <= tol) {
            report.failures.push(GradFailure { param: None, index: i, analytic: analytic[i], numeric, rel_error });
        }
    }
    Ok(report)
}

fn scalar_output(g: &Graph<f64>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    Ok(v.item())
}

/// Checks every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, tol, &all)
}

/// Checks the listed elements of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, tol: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let g = Graph::new();
    let xv = g.input(x.clone());
    let out = f(&g, xv)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(xv).map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    check_gradient(
        &analytic,
        indices,
        |i, h| {
            let mut data = x.to_vec();
            data[i] += h;
            let g = Graph::new();
            let xv = g.input(Tensor::from_vec(x.dims(), data)?);
            let out = f(&g, xv)?;
            scalar_output(&g, out)
        },
        tol,
    )
}

/// Checks the gradient with respect to stored parameters. `indices` lists,
/// per parameter, which elements to perturb.
pub fn grad_check_params<F>(store: &ParamStore<f64>, targets: &[(ParamId, Vec<usize>)], f: F, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_params_step(store, targets, f, tol, FD_STEP)
}

/// [`grad_check_params`] with an explicit step. Deep ReLU networks need a
/// smaller one: a perturbation that pushes any activation across a kink
/// measures the wrong one-sided slope.
pub fn grad_check_params_step<F>(
    store: &ParamStore<f64>,
    targets: &[(ParamId, Vec<usize>)],
    f: F,
    tol: f64,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::default();
    for (id, indices) in targets {
        let p = store.get(*id);
        let analytic = grads.param(store, *id).map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; p.value.numel()]);
        let mut local = store.clone();
        let sub = check_gradient_step(
            &analytic,
            indices,
            |i, h| {
                let mut data = p.value.to_vec();
                data[i] += h;
                local.set_value(*id, Tensor::from_vec(p.value.dims(), data)?)?;
                let g = Graph::new();
                let out = f(&g, &local)?;
                scalar_output(&g, out)
            },
            tol,
            h,
        )?;
        let mut sub = sub;
        for f in &mut sub.failures {
            f.param = Some(p.name.clone());
        }
        report.merge(sub);
    }
    Ok(report)
}
