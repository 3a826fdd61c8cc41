//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare reverse-mode gradients of a scalar-valued graph against central
/// finite differences on every element of every input. Returns the maximum
/// relative error across all elements.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1)` so that near-zero
/// gradients are judged on absolute terms.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().len() != 1 {
            return Err(TensorError::shape(
                "grad_check",
                format!("graph output must be scalar, got {:?}", out.value().shape()),
            ));
        }
        let v = out.value().item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check loss"));
        }
        Ok(v)
    };

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.value().is_finite() {
        return Err(TensorError::NonFinite("grad_check loss"));
    }
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect();

    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut vals = input.values().to_vec();
            vals[j] += eps;
            plus[i] = Tensor::from_parts(input.shape().to_vec(), vals.clone());
            let lp = eval(&plus)?;
            vals[j] -= 2.0 * eps;
            let mut minus = inputs.to_vec();
            minus[i] = Tensor::from_parts(input.shape().to_vec(), vals);
            let lm = eval(&minus)?;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[i].values()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
