//! Finite-difference verification of analytic gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Central-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-3;

/// Fixed, non-degenerate weights used to reduce an op's output to a scalar.
fn probe_weights(shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|i| ((i as f64) * 0.618_033_988 + 0.3).sin() + 0.25)
        .collect();
    Ok(Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?)
}

/// Largest `|analytic - central difference|` over the elements of
/// `inputs[wrt]`, for the scalar `sum(f(inputs) * R)` with fixed weights `R`.
///
/// Inputs are promoted to `f64`. Elements for which `skip` returns true are
/// left out (e.g. where the function is not differentiable).
pub fn max_fd_deviation<F>(
    inputs: &[Tensor],
    wrt: usize,
    step: f64,
    f: F,
    skip: impl Fn(usize) -> bool,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if wrt >= inputs.len() {
        return Err(Error::invalid("gradient target index out of range"));
    }
    let inputs: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.to_dtype(DType::F64))
        .collect::<candle_core::Result<_>>()?;
    let var = Var::from_tensor(&inputs[wrt])?;
    let mut with_var = inputs.clone();
    with_var[wrt] = var.as_tensor().clone();
    let out = f(&with_var)?;
    let r = probe_weights(out.dims())?;
    let grads = (out * &r)?.sum_all()?.backward()?;
    let analytic = match grads.get(&var) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; inputs[wrt].elem_count()],
    };

    let scalar = |ts: &[Tensor]| -> Result<f64> {
        Ok((f(ts)? * &r)?.sum_all()?.to_scalar::<f64>()?)
    };
    let base = inputs[wrt].flatten_all()?.to_vec1::<f64>()?;
    let shape = inputs[wrt].shape().clone();
    let mut worst = 0f64;
    for (i, &g) in analytic.iter().enumerate() {
        if skip(i) {
            continue;
        }
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let mut ts = inputs.clone();
        ts[wrt] = Tensor::from_vec(plus, &shape, &candle_core::Device::Cpu)?;
        let fp = scalar(&ts)?;
        ts[wrt] = Tensor::from_vec(minus, &shape, &candle_core::Device::Cpu)?;
        let fm = scalar(&ts)?;
        worst = worst.max(((fp - fm) / (2.0 * step) - g).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn smooth_function_passes() {
        let x = Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let dev = max_fd_deviation(&[x], 0, FD_STEP, |t| Ok((t[0].sqr()? * 0.5)?.exp()?), |_| false)
            .unwrap();
        assert!(dev < 1e-3, "{dev}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // `abs` at 0 has a kink: candle's subgradient there is 0 while the
        // central difference is also 0, but away from 0 a broken function
        // would show up; use a non-differentiable point explicitly.
        let x = Tensor::new(&[0.0005f64], &Device::Cpu).unwrap();
        let dev = max_fd_deviation(&[x], 0, FD_STEP, |t| Ok(t[0].abs()?), |_| false).unwrap();
        assert!(dev > 0.1);
    }
}
