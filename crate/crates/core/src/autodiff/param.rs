use std::collections::HashMap;

use super::tensor::{Scalar, Tensor};
use super::AutodiffError;

/// Index of a [`Parameter`] inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    /// Frozen parameters enter the tape as constants and are skipped by Adam.
    pub frozen: bool,
}

impl<T: Scalar> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Parameter {
            name,
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            frozen: false,
        }
    }
}

/// The parameters of one network, with names unique within the store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
    /// Adam step counter shared by all parameters of the store.
    step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new(), step: 0 }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId, AutodiffError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Number of scalar values in parameters that are not frozen.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Clears Adam moments of every trainable parameter and restarts the step counter.
    pub fn reset_optimizer(&mut self) {
        for p in self.params.iter_mut().filter(|p| !p.frozen) {
            p.first_moment.fill(T::zero());
            p.second_moment.fill(T::zero());
        }
        self.step = 0;
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        for (g, v) in p.grad.data_mut().iter_mut().zip(grad) {
            *g = T::from_f64(g.as_f64() + v);
        }
    }

    /// Values of all parameters, in store order.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<T>]) -> Result<(), AutodiffError> {
        if values.len() != self.params.len() {
            return Err(AutodiffError::Shape {
                op: "restore",
                detail: format!("{} tensors for {} parameters", values.len(), self.params.len()),
            });
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if !p.value.same_shape(v) {
                return Err(AutodiffError::Shape {
                    op: "restore",
                    detail: format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape()),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

/// Adaptive-moment-estimation optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Applies one bias-corrected update to every non-frozen parameter and
    /// zeroes all gradients.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in store.params.iter_mut() {
            if !p.frozen {
                let value = p.value.data_mut();
                let m = p.first_moment.data_mut();
                let v = p.second_moment.data_mut();
                for (i, g) in p.grad.data().iter().enumerate() {
                    let g = g.as_f64();
                    let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * g;
                    let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * g * g;
                    m[i] = T::from_f64(mi);
                    v[i] = T::from_f64(vi);
                    let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                    value[i] = T::from_f64(value[i].as_f64() - update);
                }
            }
            p.grad.fill(T::zero());
        }
    }
}
