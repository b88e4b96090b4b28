use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` with central finite differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
/// `f` receives a fresh graph and the node holding `x` and must return a
/// scalar node.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-8, 1e-4]"
        )));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xi = g.constant(point.clone());
        let out = f(&mut g, xi)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let xi = g.leaf(x.clone(), true);
    let out = f(&mut g, xi)?;
    let fx = g.value(out).clone();
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {:?}", fx.data())));
    }
    g.backward(out)?;
    let analytic = g.grad_or_zero(xi);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let (hi, lo) = (orig + eps, orig - eps);
        probe.data_mut()[i] = hi;
        let up = eval(&probe)?;
        probe.data_mut()[i] = lo;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("f near coordinate {i}")));
        }
        let numeric = (up - down) / (hi - lo);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
