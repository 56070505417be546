use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are compared in absolute terms instead of amplifying round-off.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// max over entries of `|a - n| / max(|a|, |n|, 1e-6)`.
    pub max_rel_error: f64,
    /// A relu input sat exactly on its kink at `point`.
    pub nonsmooth: bool,
    pub nonfinite: bool,
    pub passed: bool,
}

/// Compares the tape gradient of scalar `f` at `point` with central finite
/// differences of width `step`.
pub fn gradient_check<F>(f: F, point: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }

    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let fx = g.value(y).item()?;
    g.backward(y)?;
    let nonsmooth = g.relu_kinks() > 0;
    let analytic = g
        .grad(x)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        g.value(y).item()
    };

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let nonfinite = !fx.is_finite()
        || analytic.iter().chain(&numeric).any(|v| !v.is_finite());
    let max_rel_error = if nonfinite {
        f64::INFINITY
    } else {
        analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
            .fold(0.0, f64::max)
    };
    let passed = !nonfinite && !nonsmooth && max_rel_error <= tol;
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        nonsmooth,
        nonfinite,
        passed,
    })
}
