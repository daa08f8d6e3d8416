//! Dense f64 tensors, named parameter sets, and a tape-based reverse-mode
//! differentiation engine.

mod gradcheck;
mod kernels;
mod optim;
mod tape;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::util::{Digest, Hasher};

pub use gradcheck::{finite_diff_grad, relative_error, GradcheckCase, GradcheckReport};
pub use kernels::{matmul_into, softmax_in_place};
pub use optim::{Adam, AdamConfig, OptimizerState};
pub use tape::{Csr, Grads, Tape, Var, CE_FLOOR};

/// Row-major dense tensor of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(v);
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Weight init: Gaussian with std = 1/sqrt(fan_in), fan_in = shape[0].
    pub fn init_weight<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let fan_in = shape.first().copied().unwrap_or(1).max(1);
        Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.numel() / self.cols().max(1),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if self.requires_grad {
            match &mut self.grad {
                Some(g) => g.fill(0.0),
                None => self.grad = Some(vec![0.0; self.data.len()]),
            }
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Trainable tensor with a stable identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub tensor: Tensor,
}

/// Ordered collection of parameters with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable parameter; ids must be unique.
    pub fn insert(&mut self, id: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(Error::contract(format!("duplicate parameter id {id}")));
        }
        tensor.requires_grad = true;
        self.index.insert(id.clone(), self.params.len());
        self.params.push(Parameter { id, tensor });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.index.get(id).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.index.get(id).map(|&i| &mut self.params[i])
    }

    pub fn tensor(&self, id: &str) -> Result<&Tensor> {
        self.get(id)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::contract(format!("missing parameter {id}")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn set_trainable(&mut self, on: bool) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(on);
        }
    }

    /// Returns the parameters whose id starts with `prefix`, in order.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for p in self.params.iter().filter(|p| p.id.starts_with(prefix)) {
            out.index.insert(p.id.clone(), out.params.len());
            out.params.push(p.clone());
        }
        out
    }

    /// Replaces (or appends) every parameter of `other` by id.
    pub fn overwrite(&mut self, other: &ParamSet) {
        for p in &other.params {
            match self.index.get(&p.id) {
                Some(&i) => self.params[i] = p.clone(),
                None => {
                    self.index.insert(p.id.clone(), self.params.len());
                    self.params.push(p.clone());
                }
            }
        }
    }

    /// Digest over ids, shapes and values in insertion order.
    pub fn content_hash(&self) -> Digest {
        let mut h = Hasher::new();
        h.u64(self.params.len() as u64);
        for p in &self.params {
            h.str(&p.id);
            h.u64(p.tensor.shape.len() as u64);
            for &d in &p.tensor.shape {
                h.u64(d as u64);
            }
            h.f64s(&p.tensor.data);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn content_hash_tracks_values() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let h0 = ps.content_hash();
        ps.get_mut("w").unwrap().tensor.data_mut()[0] = 1.5;
        assert_ne!(h0, ps.content_hash());
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad(), Some(&[2.0, 4.0][..]));
        t.zero_grad();
        assert_eq!(t.grad(), Some(&[0.0, 0.0][..]));
    }
}
