//! Named parameter storage with gradient slots.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CvsError, Result};
use crate::tensor::{Element, Shape, Tensor4D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4D<T>,
    pub grad: Option<Tensor4D<T>>,
    /// Excluded from weight decay (biases, norm gains).
    pub no_decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4D<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    pub fn add_no_decay(&mut self, name: impl Into<String>, value: Tensor4D<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    fn push(&mut self, name: String, value: Tensor4D<T>, no_decay: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, grad: None, no_decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4D<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor4D<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(CvsError::shape(
                "set_value",
                format!("{}: {} vs {}", p.name, value.shape(), p.value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor4D<T>) {
        let p = &mut self.params[id.0];
        match p.grad.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => p.grad = Some(g.clone()),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    no_decay: p.no_decay,
                })
                .collect(),
        }
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.params.iter().find(|p| !p.value.all_finite()).map(|p| p.name.as_str())
    }
}

/// Kaiming-normal fan-in init: `N(0, 2 / fan_in)`.
pub fn kaiming_normal<T: Element, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor4D<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.numel()).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor4D::from_vec(shape, data).expect("length matches shape")
}

/// Uniform `±1/sqrt(fan_in)` init for linear maps.
pub fn uniform_fan_in<T: Element, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor4D<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor4D::random_uniform(shape, -bound, bound, rng)
}
