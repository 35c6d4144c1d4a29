//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst relative error over all inputs, `‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖)`
/// per input tensor (zero when both gradients vanish).
#[derive(Clone, Debug)]
pub struct GradReport {
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Relative disagreement of two tensors, by Frobenius norm.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).map(|d| d.norm()).unwrap_or(f64::INFINITY);
    let scale = a.norm().max(b.norm());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of step `h` of the scalar built by `f`, one tensor
/// per input.
pub fn numeric_gradient<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut numeric = inputs[k].clone();
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            work[k].data_mut()[e] = x0 + h;
            let fp = eval(&work)?;
            work[k].data_mut()[e] = x0 - h;
            let fm = eval(&work)?;
            work[k].data_mut()[e] = x0;
            numeric.data_mut()[e] = (fp - fm) / (2.0 * h);
        }
        if !numeric.all_finite() {
            return Err(Error::Contract(format!("non-finite finite difference for input {k}")));
        }
        out.push(numeric);
    }
    Ok(out)
}

/// Builds `f` on a fresh tape with `inputs` as parameters, compares the
/// reverse-mode gradient of the scalar output with central differences of
/// step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let numeric = numeric_gradient(inputs, h, &f)?;
    let rel_errors = vars
        .iter()
        .zip(&numeric)
        .enumerate()
        .map(|(k, (v, n))| {
            let analytic = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::new(inputs[k].shape().to_vec(), vec![0.0; inputs[k].len()]).expect("same shape"));
            relative_error(&analytic, n)
        })
        .collect();
    Ok(GradReport { rel_errors })
}

