//! Central finite-difference checks for the hand-written backward passes.

use super::network::NetworkState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of `objective` w.r.t. every parameter of
/// `net`, in [`NetworkState::param_slices`] order.
pub fn numeric_gradient(
    net: &NetworkState,
    step: f64,
    mut objective: impl FnMut(&NetworkState) -> Result<f64>,
) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut probe = net.clone();
    let sizes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (slot, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.param_slices_mut()[slot][i];
            probe.param_slices_mut()[slot][i] = orig + step;
            let plus = finite(objective(&probe)?)?;
            probe.param_slices_mut()[slot][i] = orig - step;
            let minus = finite(objective(&probe)?)?;
            probe.param_slices_mut()[slot][i] = orig;
            out.push((plus - minus) / (2.0 * step));
        }
    }
    Ok(out)
}

/// Central-difference gradient of `f` w.r.t. each entry of `x`.
pub fn numeric_input_gradient(
    x: &Tensor,
    step: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = finite(f(&probe)?)?;
        probe.data_mut()[i] = orig - step;
        let minus = finite(f(&probe)?)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// `max |a - n| / max(|a|, |n|, 1e-6)` over paired entries.
///
/// A central difference cannot resolve gradients below about
/// `ulp(loss) / step` (2e-11 for a loss near 1 at step 1e-5), so components
/// under the floor are effectively compared in absolute terms.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_relative_error_with_floor(analytic, numeric, 1e-6)
}

/// `max |a - n| / max(|a|, |n|, floor)` over paired entries.
pub fn max_relative_error_with_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares backprop parameter gradients of `loss(net(x))` with central
/// differences and returns the worst relative error.
///
/// `loss` returns the scalar loss and its gradient w.r.t. the network output.
pub fn grad_check(
    net: &NetworkState,
    loss: impl Fn(&Tensor) -> Result<(f64, Tensor)>,
    x: &Tensor,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let x = net.coerce_input(x)?;
    let acts = net.forward(&x)?;
    let (value, grad_out) = loss(acts.last().unwrap())?;
    finite(value)?;
    let analytic = net.backward(&acts, &grad_out)?.flatten_params();
    let numeric = numeric_gradient(net, step, |probe| Ok(loss(&probe.predict(&x)?)?.0))?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss evaluated to {v}")))
    }
}

/// `0.5 * ||y - target||^2` and its output gradient.
pub fn squared_error(target: &Tensor) -> impl Fn(&Tensor) -> Result<(f64, Tensor)> + '_ {
    move |y: &Tensor| {
        let diff = y.sub(&target.reshaped(y.shape())?)?;
        Ok((0.5 * diff.sum_squares(), diff))
    }
}
