//! Named parameter storage and the Adam optimizer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
#[cfg(test)]
use crate::tensor::Shape;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One learnable tensor with its gradient accumulator and Adam state.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape();
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: Tensor::zeros(shape),
            adam_m: Tensor::zeros(shape),
            adam_v: Tensor::zeros(shape),
            step: 0,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    pub fn add_grad(&mut self, id: ParamId, delta: &Tensor<T>) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.shape(), delta.shape());
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g = *g + *d;
        }
    }

    /// Bias-corrected Adam update over every parameter; zeroes gradients.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        let (b1, b2) = (T::of_f64(beta1), T::of_f64(beta2));
        let one = T::one();
        let epst = T::of_f64(eps);
        for p in &mut self.params {
            p.step += 1;
            let t = p.step as i32;
            let corr1 = T::of_f64(1.0 - beta1.powi(t));
            let corr2 = T::of_f64(1.0 - beta2.powi(t));
            let lrt = T::of_f64(lr);
            let n = p.value.shape().numel();
            for i in 0..n {
                let g = p.grad.data()[i];
                let m = b1 * p.adam_m.data()[i] + (one - b1) * g;
                let v = b2 * p.adam_v.data()[i] + (one - b2) * g * g;
                p.adam_m.data_mut()[i] = m;
                p.adam_v.data_mut()[i] = v;
                let mhat = m / corr1;
                let vhat = v / corr2;
                let upd = lrt * mhat / (vhat.sqrt() + epst);
                p.value.data_mut()[i] = p.value.data()[i] - upd;
                p.grad.data_mut()[i] = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::full(Shape::new(1, 4, 1, 1), 1.25)).unwrap();
        s.adam_step(0.1, 0.9, 0.999, 1e-8);
        for &v in s.value(id).data() {
            assert_eq!(v, 1.25);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // With constant gradient g, bias correction makes mhat = g and
        // vhat = g^2, so the first update is lr * g / (|g| + eps) ~ lr.
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::scalar(0.0)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(3.7);
        s.adam_step(0.1, 0.9, 0.999, 1e-8);
        let w = s.value(id).item();
        assert!((w + 0.1).abs() < 1e-6, "w after one step: {w}");
    }

    #[test]
    fn adam_matches_scalar_reference_recurrence_on_quadratic() {
        // Independent recurrence for f(w) = (w-3)^2, lr 0.1, from w=0.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut w_ref = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::scalar(0.0)).unwrap();
        for t in 1..=100 {
            let g_ref = 2.0 * (w_ref - 3.0);
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w_ref -= lr * mhat / (vhat.sqrt() + eps);

            let w = s.value(id).item();
            s.get_mut(id).grad = Tensor::scalar(2.0 * (w - 3.0));
            s.adam_step(lr, b1, b2, eps);
            assert!((s.value(id).item() - w_ref).abs() < 1e-12, "diverged at step {t}");
        }
        assert!((s.value(id).item() - 3.0).abs() < 0.5, "w={}", s.value(id).item());
    }

    #[test]
    fn gradients_zeroed_after_step() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::scalar(1.0)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(2.0);
        s.adam_step(0.01, 0.9, 0.999, 1e-8);
        assert_eq!(s.get(id).grad.item(), 0.0);
    }
}
