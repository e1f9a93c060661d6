use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Every tensor is stored as a 2-D matrix; vectors
/// are `1 x n` rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name; layouts are fixed at
    /// model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name} registered twice"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Mat::from_shape_simple_fn(shape, || rng.random_range(-scale..=scale));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> ParamId {
        self.add(name, Mat::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: (usize, usize)) -> ParamId {
        self.add(name, Mat::ones(shape))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Sets every tensor to zero.
    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.fill(0.0);
        }
    }
}
