use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Gradients, Tape};
use super::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        });
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::of(v)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
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

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add the gradients of every parameter recorded on `tape`.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (id, var) in tape.param_vars() {
            let Some(g) = grads.get(var) else { continue };
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }

    /// Give every parameter without a gradient a zero one.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    /// Replace values from another store by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.value(id))
                .ok_or_else(|| TensorError::UnknownParam(p.name.clone()))?;
            if src.shape() != p.value.shape() {
                return Err(super::shape_err(
                    "load",
                    format!("`{}`: {:?} vs {:?}", p.name, p.value.shape(), src.shape()),
                ));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
