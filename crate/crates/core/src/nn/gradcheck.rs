//! Central finite-difference gradient verification.
//!
//! The numeric side evaluates the objective twice per element and never
//! touches the adjoint code, so it stays an independent oracle for the
//! tape's backward pass.

use crate::nn::optim::ParamSet;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::nn::NnError;

/// Step used by the central difference (f(x+h) - f(x-h)) / 2h.
pub const FD_STEP: f64 = 1e-5;

/// A differentiable scalar objective over a list of input tensors.
pub type BuildFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NnError>;

fn eval(build: &BuildFn, inputs: &[Tensor<f64>]) -> Result<f64, NnError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Gradients of `build` at `inputs` via the tape's backward pass.
pub fn analytic_gradients(
    build: &BuildFn,
    inputs: &[Tensor<f64>],
) -> Result<Vec<Tensor<f64>>, NnError> {
    let mut params = ParamSet::new();
    let slots: Vec<usize> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| params.add(format!("in{i}"), t.clone()))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = slots.iter().map(|&s| tape.param(&params, s)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss, &mut params)?;
    Ok(slots.iter().map(|&s| params.get(s).grad.clone()).collect())
}

/// Gradients of `build` at `inputs` via central differences.
pub fn numeric_gradients(
    build: &BuildFn,
    inputs: &[Tensor<f64>],
) -> Result<Vec<Tensor<f64>>, NnError> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + FD_STEP;
            let plus = eval(build, &work)?;
            work[i].data_mut()[e] = orig - FD_STEP;
            let minus = eval(build, &work)?;
            work[i].data_mut()[e] = orig;
            grad.data_mut()[e] = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Relative error with denominator max(|a|, |b|, 1e-8).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative error between analytic and numeric gradients over
/// every element of every input.
pub fn max_gradient_error(build: &BuildFn, inputs: &[Tensor<f64>]) -> Result<f64, NnError> {
    let analytic = analytic_gradients(build, inputs)?;
    let numeric = numeric_gradients(build, inputs)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_error(av, nv));
        }
    }
    Ok(worst)
}
