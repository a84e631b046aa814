//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::Result;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Outcome of a kink-aware check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Maximum `|a - n| / max(1, |a|, |n|)` over the compared coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose `+eps` or `-eps` probe changed the kink pattern.
    pub skipped: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, analytic: f64, (up, up_k): (f64, u64), (down, down_k): (f64, u64), base: u64, eps: f64, skip_kinks: bool) {
        if skip_kinks && (up_k != base || down_k != base) {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, (up - down) / (2.0 * eps)));
    }
}

fn input_check<F>(params: &ParamStore, f: F, point: &Tensor, eps: f64, skip_kinks: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<(f64, u64)> {
        let mut g = Graph::new(params, true, 0);
        let x = g.input(t.clone());
        let loss = f(&mut g, x)?;
        Ok((g.data(loss)[0], g.kink_pattern()))
    };
    let mut g = Graph::new(params, true, 0);
    let x = g.input_with_grad(point.clone());
    let loss = f(&mut g, x)?;
    let base = g.kink_pattern();
    let grads = g.backward(loss)?;
    let zeros = vec![0.0; point.len()];
    let analytic = grads.wrt(x).unwrap_or(&zeros).to_vec();
    let mut report = GradCheckReport::new();
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        report.record(analytic[i], up, down, base, eps, skip_kinks);
    }
    Ok(report)
}

fn param_check<F>(params: &mut ParamStore, f: F, eps: f64, skip_kinks: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let (analytic, base): (Vec<(ParamId, Vec<f64>)>, u64) = {
        let mut g = Graph::new(params, true, 0);
        let loss = f(&mut g)?;
        let base = g.kink_pattern();
        let grads = g.backward(loss)?;
        let a = params
            .iter()
            .map(|(id, p)| {
                let a = grads
                    .param(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.len()]);
                (id, a)
            })
            .collect();
        (a, base)
    };
    let eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new(store, true, 0);
        let loss = f(&mut g)?;
        Ok((g.data(loss)[0], g.kink_pattern()))
    };
    let mut report = GradCheckReport::new();
    for (id, a) in analytic {
        for (i, &ai) in a.iter().enumerate() {
            let x0 = params.value(id).data()[i];
            params.get_mut(id).value.data_mut()[i] = x0 + eps;
            let up = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = x0 - eps;
            let down = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = x0;
            report.record(ai, up, down, base, eps, skip_kinks);
        }
    }
    Ok(report)
}

/// Compares the gradient of the scalar `f` with respect to its input against
/// central differences at `point`. Returns the maximum relative error
/// `|a - n| / max(1, |a|, |n|)` over all coordinates.
///
/// `f` receives a fresh training-mode graph (fixed dropout seed, so every
/// evaluation draws the same masks) and the input variable, and returns the
/// loss.
pub fn grad_check<F>(params: &ParamStore, f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    Ok(input_check(params, f, point, eps, false)?.max_rel_err)
}

/// Like [`grad_check`] but perturbs every parameter in `params` instead of an
/// input. `f` builds the loss on a fresh graph.
pub fn grad_check_params<F>(params: &mut ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    Ok(param_check(params, f, eps, false)?.max_rel_err)
}

/// [`grad_check`] restricted to coordinates where neither probe crosses a
/// ReLU, max or floor kink (see [`Graph::kink_pattern`]). Across a kink the
/// function is not differentiable on `[x - eps, x + eps]` and the central
/// difference says nothing about the analytic gradient.
pub fn grad_check_smooth<F>(params: &ParamStore, f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    input_check(params, f, point, eps, true)
}

/// Kink-aware form of [`grad_check_params`].
pub fn grad_check_params_smooth<F>(params: &mut ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    param_check(params, f, eps, true)
}
