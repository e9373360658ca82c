use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// max |analytic − numeric| over the largest magnitude of either gradient
    pub scaled_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheck {
        assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
        let mut max_rel_error = 0.0;
        let mut worst_index = 0;
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = relative_error(a, n);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst_index = i;
            }
            diff = diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
        let scaled_error = if scale == 0.0 { diff } else { diff / scale };
        GradCheck { max_rel_error, scaled_error, worst_index, analytic, numeric }
    }
}

/// Reverse-mode gradient of `f` at `point`.
pub fn analytic_gradient<T, F>(mut f: F, point: &Tensor<T>) -> Result<Vec<f64>>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x)?;
    let grads = g.backward(out)?;
    Ok(match grads.get(x) {
        Some(d) => d.iter().map(|v| v.to_f64_lossy()).collect(),
        None => vec![0.0; point.numel()],
    })
}

/// Central differences of `f` at `point` with step `step`.
pub fn numeric_gradient<T, F>(mut f: F, point: &Tensor<T>, step: f64) -> Result<Vec<f64>>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut eval = |p: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let out = f(&mut g, x)?;
        Ok(g.value(out).item().to_f64_lossy())
    };
    let h = T::lit(step);
    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let base = point.data()[i];
        let (hi, lo) = (base + h, base - h);
        let mut plus = point.clone();
        plus.data_mut()[i] = hi;
        let mut minus = point.clone();
        minus.data_mut()[i] = lo;
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        // the representable step, not the requested one
        let delta = hi.to_f64_lossy() - lo.to_f64_lossy();
        numeric.push((fp - fm) / delta);
    }
    Ok(numeric)
}

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences of step `step`. `f` receives the graph and the input leaf and
/// must return a one-element output.
pub fn grad_check<T, F>(mut f: F, point: &Tensor<T>, step: f64) -> Result<GradCheck>
where
    T: Real,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&mut f, point)?;
    let numeric = numeric_gradient(&mut f, point, step)?;
    Ok(GradCheck::compare(analytic, numeric))
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
