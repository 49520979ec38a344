use crate::autodiff::Var;
use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Compares tape gradients of a scalar function against central
/// differences. Returns `max |analytic - numeric| / max(1, |analytic|)`
/// over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    if !(eps > 0.0) {
        return Err(NumError::Domain {
            op: "grad_check",
            detail: format!("step must be positive, got {eps}"),
        });
    }
    let vars: Vec<Var<f64>> = inputs.iter().cloned().map(Var::param).collect();
    let loss = f(&vars)?;
    loss.backward()?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(Var::grad_tensor).collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let cs: Vec<Var<f64>> = probe.iter().cloned().map(Var::constant).collect();
        Ok(f(&cs)?.value().item())
    };
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (t, an) in analytic.iter().enumerate() {
        for i in 0..inputs[t].numel() {
            let x0 = inputs[t].data()[i];
            probe[t].data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe[t].data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = an.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
