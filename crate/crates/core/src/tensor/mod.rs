//! Dense, contiguous, row-major 64-bit tensors.
//!
//! Tensors are immutable once built and cheap to clone (the buffer is shared).
//! All kernels in [`ops`] allocate exactly one output buffer, which is what
//! makes the graph memory estimator exact.

pub mod alloc;
pub mod ops;

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use alloc::Buffer;

pub use alloc::{
    alloc_stats, reset_peak, untracked, AllocEvent, AllocStats, Tracker, BF16_ELEMENT_SIZE, EXEC_ELEMENT_SIZE,
};
pub use ops::*;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    buf: Arc<Buffer>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.buf.data.len();
        let head: Vec<f64> = self.buf.data.iter().take(6).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("id", &self.buf.id())
            .field("data", &format_args!("{head:?}{}", if n > 6 { " .." } else { "" }))
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(dim_err!("rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(dim_err!("extents must be positive, got {shape:?}"));
    }
    Ok(())
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != numel(shape) {
            return Err(dim_err!(
                "data length {} does not match shape {shape:?} ({} elements)",
                data.len(),
                numel(shape)
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Caller guarantees `data.len() == numel(&shape)` and a valid shape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor { shape, buf: Arc::new(Buffer::new(data)) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid shape");
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], d)
    }

    /// Uniform values in `[-scale, scale)` from a seeded ChaCha stream.
    pub fn rand_uniform(shape: &[usize], scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::rand_uniform_with(shape, scale, &mut rng)
    }

    pub fn rand_uniform_with(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        check_shape(shape).expect("invalid shape");
        let data = (0..numel(shape)).map(|_| rng.gen_range(-scale..scale)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.buf.data
    }

    /// Execution bytes (8 per element).
    pub fn nbytes(&self) -> u64 {
        self.numel() as u64 * EXEC_ELEMENT_SIZE
    }

    /// Unique identifier of the backing allocation.
    pub fn id(&self) -> u64 {
        self.buf.id()
    }

    pub fn is_tracked(&self) -> bool {
        self.buf.is_tracked()
    }

    /// Mutable access when the buffer is not shared.
    pub fn data_mut(&mut self) -> Option<&mut [f64]> {
        Arc::get_mut(&mut self.buf).map(|b| b.data.as_mut_slice())
    }

    /// Copy into a new buffer charged to the current tracker.
    pub fn deep_clone(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), buf: Arc::new((*self.buf).clone()) }
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let st = strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.buf.data[off]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.buf.data.clone()
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(dim_err!("cannot compare {:?} with {:?}", self.shape, other.shape));
        }
        Ok(self.data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
