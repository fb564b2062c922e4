//! Trainable parameters and the Adam update.

use rand::Rng;

use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::NnError;

/// Adam defaults.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// A trainable tensor with its gradient accumulator and Adam state.
#[derive(Debug, Clone)]
pub struct Parameter<F: Scalar> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub adam_m: Tensor<F>,
    pub adam_v: Tensor<F>,
    pub step_count: u64,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::ZERO);
    }
}

/// One bias-corrected Adam step; zeroes the gradient afterwards.
pub fn adam_step<F: Scalar>(
    param: &mut Parameter<F>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), NnError> {
    if !param.grad.is_all_finite() {
        return Err(NnError::NonFiniteGradient);
    }
    param.step_count += 1;
    let t = param.step_count as i32;
    let b1 = F::from_f64(beta1);
    let b2 = F::from_f64(beta2);
    let one_minus_b1 = F::from_f64(1.0 - beta1);
    let one_minus_b2 = F::from_f64(1.0 - beta2);
    let bc1 = F::ONE - b1.powi(t);
    let bc2 = F::ONE - b2.powi(t);
    let lr_f = F::from_f64(lr);
    let eps_f = F::from_f64(eps);

    let g = param.grad.data();
    let m = param.adam_m.data_mut();
    let v = param.adam_v.data_mut();
    let p = param.value.data_mut();
    for i in 0..g.len() {
        m[i] = b1 * m[i] + one_minus_b1 * g[i];
        v[i] = b2 * v[i] + one_minus_b2 * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] - lr_f * m_hat / (v_hat.sqrt() + eps_f);
    }
    param.zero_grad();
    Ok(())
}

/// Named, ordered collection of parameters. Slot indices are stable for
/// the life of the set and are how the tape routes gradients back.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F: Scalar> {
    entries: Vec<(String, Parameter<F>)>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> usize {
        self.entries.push((name.into(), Parameter::new(value)));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Parameter<F> {
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter<F> {
        &mut self.entries[slot].1
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<F>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<F>)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), &mut *p))
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.entries.iter_mut() {
            p.zero_grad();
        }
    }

    /// Multiply every accumulated gradient by `k` (batch averaging).
    pub fn scale_grads(&mut self, k: F) {
        for (_, p) in self.entries.iter_mut() {
            p.grad.scale_assign(k);
        }
    }

    /// Adam on every parameter with the default betas.
    pub fn adam_step_all(&mut self, lr: f64) -> Result<(), NnError> {
        for (_, p) in self.entries.iter_mut() {
            adam_step(p, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
        }
        Ok(())
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Full copy of values and optimizer state, for scan/restore.
    pub fn snapshot(&self) -> Vec<Parameter<F>> {
        self.entries.iter().map(|(_, p)| p.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Parameter<F>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for ((_, p), s) in self.entries.iter_mut().zip(snapshot) {
            *p = s.clone();
        }
    }

    /// Bitwise equality of parameter values against a snapshot.
    pub fn values_equal(&self, snapshot: &[Parameter<F>]) -> bool {
        self.entries.len() == snapshot.len()
            && self
                .entries
                .iter()
                .zip(snapshot)
                .all(|((_, p), s)| p.value.data() == s.value.data())
    }
}

/// Uniform init with limit sqrt(6 / (fan_in + fan_out)). Values are drawn
/// in f64 then converted, so a given seed yields the same numbers at
/// every precision.
pub fn xavier_uniform<F: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-limit..=limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("xavier shape")
}
