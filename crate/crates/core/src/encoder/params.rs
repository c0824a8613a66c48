//! Flat, named parameter storage shared by all encoder architectures.

use std::collections::HashMap;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[id].data[..])
    }

    /// Views a parameter as a matrix; 1-D tensors become a single row.
    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let t = &self.tensors[id];
        let (r, c) = match t.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [r, rest @ ..] => (*r, rest.iter().product()),
            [] => (1, 1),
        };
        ArrayView2::from_shape((r, c), &t.data).expect("contiguous tensor")
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            tensors: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }
}

/// Gradient buffers laid out exactly like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id]
    }

    pub fn mat_mut(&mut self, id: ParamId, rows: usize) -> ArrayViewMut2<'_, f64> {
        let t = &mut self.tensors[id];
        let cols = t.len() / rows;
        ArrayViewMut2::from_shape((rows, cols), &mut t[..]).expect("contiguous gradient")
    }

    pub fn accumulate(&mut self, id: ParamId, values: impl IntoIterator<Item = f64>) {
        for (g, v) in self.tensors[id].iter_mut().zip(values) {
            *g += v;
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}
