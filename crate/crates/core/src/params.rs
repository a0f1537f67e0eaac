//! Named parameters, gradient accumulators and the Adam optimizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
}

impl<T: Real> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        let n = value.len();
        Parameter {
            name,
            value,
            grad,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
        }
    }
}

/// Registry of every trainable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    /// Registers a tensor drawn uniformly from `±sqrt(1/fan_in)`.
    pub fn register_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)));
        self.register(name, t)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        for (g, &d) in self.params[id.0].grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }
}

/// Adam with bias correction. Gradients are zeroed after every step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        for p in &mut store.params {
            let grad = p.grad.data();
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                let m = b1 * p.first_moment[i] + c1 * g;
                let v = b2 * p.second_moment[i] + c2 * g * g;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                let m_hat = m.as_f64() / bias1;
                let v_hat = v.as_f64() / bias2;
                value[i] -= T::from_f64(self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        store.zero_grad();
        Ok(())
    }
}
