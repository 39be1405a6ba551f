//! Dense tensors, the named parameter store and learning-rate groups.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("tensor dims must be positive, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::config(format!(
                "tensor dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data, grad: None })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; len], grad: None }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(dims);
        t.data.fill(value);
        t
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform(-scale, scale) entries.
    pub fn uniform(dims: &[usize], scale: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(dims);
        if scale > 0.0 {
            for v in &mut t.data {
                *v = rng.gen_range(-scale..scale);
            }
        }
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First dimension, or 1 for a vector viewed as a row.
    pub fn rows(&self) -> usize {
        if self.dims.len() == 1 {
            1
        } else {
            self.dims[0]
        }
    }

    /// Product of all but the first dimension (the length of a vector).
    pub fn cols(&self) -> usize {
        if self.dims.len() == 1 {
            self.dims[0]
        } else {
            self.dims[1..].iter().product()
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Named trainable parameters. Names are unique; iteration order is by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::clear_grad);
    }

    /// Dense index of each name in iteration order.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.params.keys().enumerate().map(|(i, k)| (k.as_str(), i)).collect()
    }
}

/// A set of parameters sharing a learning-rate multiplier and freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<String>,
    pub lr_factor: f64,
    pub frozen: bool,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, params: Vec<String>, lr_factor: f64) -> Self {
        ParamGroup { name: name.into(), params, lr_factor, frozen: false }
    }
}

/// Checks that every parameter belongs to exactly one group and every group
/// member exists.
pub fn validate_groups(store: &ParamStore, groups: &[ParamGroup]) -> Result<()> {
    let mut seen: HashMap<&str, &str> = HashMap::new();
    for g in groups {
        if !(g.lr_factor > 0.0 && g.lr_factor.is_finite()) {
            return Err(Error::config(format!("group {} has non-positive lr_factor", g.name)));
        }
        for p in &g.params {
            if !store.contains(p) {
                return Err(Error::config(format!("group {} lists unknown parameter {p}", g.name)));
            }
            if let Some(other) = seen.insert(p, &g.name) {
                return Err(Error::config(format!("parameter {p} in groups {other} and {}", g.name)));
            }
        }
    }
    if let Some(orphan) = store.names().find(|n| !seen.contains_key(n.as_str())) {
        return Err(Error::config(format!("parameter {orphan} belongs to no group")));
    }
    Ok(())
}
