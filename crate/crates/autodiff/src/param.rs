use std::collections::HashMap;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    /// Scales the optimizer step for this parameter only.
    pub lr_mult: f64,
}

/// Named, ordered collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        self.add_with_mult(name, value, 1.0)
    }

    pub fn add_with_mult(
        &mut self,
        name: impl Into<String>,
        value: Tensor<F>,
        lr_mult: f64,
    ) -> Result<ParamId> {
        let name = name.into();
        if !(lr_mult > 0.0) {
            return invalid("param", format!("{name}: learning-rate multiplier must be > 0"));
        }
        if self.by_name.contains_key(&name) {
            return invalid("param", format!("duplicate parameter name {name}"));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            lr_mult,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Adds a parameter initialised uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        self.add(name, uniform_fan_in(shape, fan_in, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Adds `scale * grads` into the per-parameter accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<F>, scale: F) {
        for (p, g) in self.params.iter_mut().zip(&grads.by_param) {
            if let Some(g) = g {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + scale * b;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies every value from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for p in &mut self.params {
            let Some(id) = other.id(&p.name) else {
                return invalid("load", format!("missing parameter {}", p.name));
            };
            let src = other.get(id);
            if src.value.shape() != p.value.shape() {
                return invalid(
                    "load",
                    format!(
                        "{}: stored shape {:?} != expected {:?}",
                        p.name,
                        src.value.shape(),
                        p.value.shape()
                    ),
                );
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    lr_mult: p.lr_mult,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub(crate) by_param: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`; a parameter that did not influence the loss gets zeros.
    pub fn get_or_zero(&self, store: &ParamStore<F>, id: ParamId) -> Tensor<F> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    }
}

pub fn uniform_fan_in<F: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::of(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
