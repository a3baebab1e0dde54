use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Named parameters in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub(crate) params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].tensor
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.params.iter().map(|p| &p.tensor)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.params.iter_mut().map(|p| &mut p.tensor).collect()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

/// Parameters bound into one graph. Leaves are created on first use, so an
/// inference pass only copies the parameters it touches.
pub struct Bound<'g, 's> {
    graph: &'g Graph<f32>,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'g, f32>>>>,
}

impl<'g, 's> Bound<'g, 's> {
    pub fn new(graph: &'g Graph<f32>, store: &'s ParamStore) -> Self {
        Self { graph, store, vars: RefCell::new(vec![None; store.len()]) }
    }

    pub fn graph(&self) -> &'g Graph<f32> {
        self.graph
    }

    pub fn get(&self, id: ParamId) -> Var<'g, f32> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.graph.leaf(self.store.get(id).clone()))
    }

    /// The leaf for `id`, if this graph touched it.
    pub fn var(&self, id: usize) -> Option<Var<'g, f32>> {
        self.vars.borrow()[id]
    }
}

/// Parameter factory with a seeded initializer.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng) as f32);
        self.store.add(name, t)
    }

    /// Xavier-normal for the given fan in/out.
    pub fn xavier(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.normal(name, shape, std)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }
}
