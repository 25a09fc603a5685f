//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coordinates: usize,
    /// `(input, offset, analytic, numeric)` at the largest relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, REL_ERR_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the tape gradient of a scalar `f` against
/// `(f(x+h) − f(x−h)) / 2h` for every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(f, inputs, h, REL_ERR_FLOOR)
}

/// [`grad_check`] with an explicit relative-error denominator floor, for
/// deep compositions whose difference quotients carry more rounding noise.
pub fn grad_check_with_floor<F>(f: F, inputs: &[Tensor<f64>], h: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 || floor <= 0.0 {
        return Err(invalid!("finite-difference step and error floor must be positive"));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (slot, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[slot].shape()));
        for i in 0..inputs[slot].numel() {
            let x0 = inputs[slot].data()[i];
            work[slot].data_mut()[i] = x0 + h;
            let plus = eval(&work)?;
            work[slot].data_mut()[i] = x0 - h;
            let minus = eval(&work)?;
            work[slot].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            let rel = relative_error_with_floor(a, numeric, floor);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.worst = Some((slot, i, a, numeric));
            }
            report.max_rel_err = report.max_rel_err.max(rel);
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Reduce any output to a scalar via a fixed random projection, so that
/// ops whose plain sum has a trivial gradient (e.g. batch norm) are still
/// exercised on every output coordinate.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let weights = RngStream::new(seed, 0xFD).normal_tensor::<f64>(&shape, 1.0);
    let w = g.constant(weights);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}
