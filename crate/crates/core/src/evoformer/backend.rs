//! The primitive interface the evoformer sub-modules are written against.
//!
//! [`Eager`] evaluates immediately on tensors; the graph tracer implements
//! the same trait to record nodes instead. Writing the block once keeps the
//! traced graph and the reference module in lockstep.

use super::params::BlockParams;
use crate::error::Result;
use crate::tensor::{self, Tensor, LN_EPS};

pub trait Backend {
    type Value: Clone;

    fn shape(&self, v: &Self::Value) -> Vec<usize>;
    fn param(&mut self, name: &str) -> Result<Self::Value>;

    fn linear(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>) -> Result<Self::Value>;
    fn layernorm(&mut self, x: &Self::Value, gamma: &Self::Value, beta: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, factor: f64) -> Result<Self::Value>;
    fn softmax(&mut self, x: &Self::Value, axis: usize) -> Result<Self::Value>;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn permute(&mut self, x: &Self::Value, perm: &[usize]) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn outer_mean(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn contract_k(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
}

/// Immediate evaluation against a parameter set.
pub struct Eager<'p> {
    params: &'p BlockParams,
}

impl<'p> Eager<'p> {
    pub fn new(params: &'p BlockParams) -> Self {
        Eager { params }
    }
}

impl Backend for Eager<'_> {
    type Value = Tensor;

    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn param(&mut self, name: &str) -> Result<Tensor> {
        self.params.get(name).cloned()
    }

    fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        tensor::linear(x, w, b)
    }

    fn layernorm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        tensor::layernorm(x, gamma, beta, LN_EPS)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add(a, b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::mul(a, b)
    }

    fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::sigmoid(x))
    }

    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::relu(x))
    }

    fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        Ok(tensor::scale(x, factor))
    }

    fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        tensor::softmax(x, axis)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul(a, b)
    }

    fn permute(&mut self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        tensor::permute(x, perm)
    }

    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        tensor::reshape(x, shape)
    }

    fn outer_mean(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::outer_mean(a, b)
    }

    fn contract_k(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::contract_k(a, b)
    }
}
