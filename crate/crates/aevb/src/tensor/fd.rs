//! Central finite differences, the independent yardstick every analytic
//! gradient in this crate is measured against.

use super::Tensor;
use crate::error::Result;

/// Central-difference gradient of a scalar-valued function at `x`.
///
/// Each coordinate is perturbed by `h * max(1, |x_i|)` in both directions,
/// so the step adapts to the magnitude of the coordinate. The closure is
/// invoked 2 * numel times; any randomness inside it must be frozen by the
/// caller (clone the rng before each call) or the differences measure noise
/// instead of slope.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let step = h * xi.abs().max(1.0);
        probe.data_mut()[i] = xi + step;
        let hi = f(&probe)?;
        probe.data_mut()[i] = xi - step;
        let lo = f(&probe)?;
        probe.data_mut()[i] = xi;
        grad.data_mut()[i] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}
