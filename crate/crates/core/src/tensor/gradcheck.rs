//! Central-difference verification of analytic gradients.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};
use crate::param::{ParamId, ParamStore};

/// Denominator floor for the relative error, so coordinates whose true gradient is ~0 are
/// judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error: (parameter or input index, flat offset).
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: (usize, usize)) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = at;
        }
    }

    fn new(tol: f64) -> Self {
        GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0, tol }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks `d f(x) / dx` for a scalar-valued `f` against `(f(x+h) − f(x−h)) / 2h` at every
/// coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let analytic = analytic_input_grad(&f, x)?;
    check_against(&f, x, analytic.data(), h, tol)
}

/// Same as [`grad_check`] but compares against a caller-supplied analytic gradient; used to
/// exercise the harness with a deliberately wrong gradient.
pub fn check_against<F>(f: &F, x: &Tensor, analytic: &[f64], h: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let eval = |t: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.input(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut report = GradCheckReport::new(tol);
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        report.record(analytic[i], numeric, (0, i));
    }
    Ok(report)
}

pub fn analytic_input_grad<F>(f: &F, x: &Tensor) -> Result<Tensor, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::frozen_params();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    let mut empty = ParamStore::new();
    g.backward(out, &mut empty)?;
    Ok(g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Gradient check over model parameters. At most `per_param` randomly chosen coordinates of
/// each parameter are perturbed (all of them when the parameter is smaller).
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    f: F,
    h: f64,
    tol: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, TensorError>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out, store)?;
    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::new(tol);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> =
            if n <= per_param { (0..n).collect() } else { sample(&mut rng, n, per_param).into_vec() };
        for c in coords {
            let orig = store.value(id).data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + h;
            let fp = eval_params(&f, store)?;
            store.get_mut(id).value.data_mut()[c] = orig - h;
            let fm = eval_params(&f, store)?;
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            report.record(analytic[id.index()].data()[c], numeric, (id.index(), c));
        }
    }
    Ok(report)
}

fn eval_params<F>(f: &F, store: &ParamStore) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, TensorError>,
{
    let mut g = Graph::inference();
    let out = f(&mut g, store)?;
    Ok(g.value(out).item())
}
