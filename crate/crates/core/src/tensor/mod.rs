//! Dense f64 tensors, a define-by-run autodiff graph and the AdamW optimizer.
//!
//! [`Tensor`] is a plain row-major buffer with an optional gradient slot. All
//! differentiable math goes through [`Graph`], which records one node per op
//! and replays them in reverse on [`Graph::backward`]. A graph is single-use:
//! each forward pass builds a fresh one.

mod graph;
pub(crate) mod kernels;
mod optim;

pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!(
                "tensor shape must be a non-empty list of positive integers, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Parameter("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(vec![n, n], data)
    }

    /// Samples from a normal(0, std) truncated at two standard deviations.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Self> {
        let n = shape.iter().product();
        let normal = rand_distr::StandardNormal;
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z: f64 = rng.sample(normal);
            if z.abs() <= 2.0 {
                data.push(z * std);
            }
        }
        Self::new(shape.to_vec(), data)
    }

    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix("matmul", &self.shape)?;
        let (k2, n) = as_matrix("matmul", &other.shape)?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        Tensor::new(vec![m, n], kernels::matmul(&self.data, &other.data, m, k, n))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = as_matrix("transpose", &self.shape)?;
        Tensor::new(vec![n, m], kernels::transpose(&self.data, m, n))
    }
}

pub(crate) fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::dim(op, shape, &[])),
    }
}

/// Inverted-dropout keep mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_keep_mask(len: usize, rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                scale
            }
        })
        .collect())
}

/// Applies inverted dropout outside of any graph. Identity when `training`
/// is false.
pub fn dropout_mask(x: &Tensor, rate: f64, seed: u64, training: bool) -> Result<Tensor> {
    let mask = dropout_keep_mask(x.len(), rate, seed)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape.clone(), data)
}

/// Untracked layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim("layer_norm", &x.shape, gain.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Parameter("layer_norm eps must be positive".into()));
    }
    let out = kernels::layer_norm(&x.data, &gain.data, &bias.data, d, eps);
    Tensor::new(x.shape.clone(), out.y)
}

/// Untracked masked mean cross-entropy; see [`Graph::softmax_cross_entropy`].
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits);
    let loss = g.softmax_cross_entropy(l, targets, mask)?;
    Ok(g.scalar(loss))
}
