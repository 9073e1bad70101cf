//! Dense row-major `f64` tensors.
//!
//! Only the handful of operations the spiking nodes and dense layers need:
//! elementwise arithmetic, a fixed-order matmul, last-axis split/concat,
//! the Heaviside step and tolerance comparison. Every operation allocates
//! a fresh tensor; nothing is a view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seed for every random draw in the crate.
///
/// Generators are ChaCha8 streams seeded through `SeedableRng::seed_from_u64`,
/// so a seed reproduces the same sequence on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives an independent stream for sub-task `index`.
    pub fn derive(self, index: u64) -> Seed {
        // splitmix64 finalizer
        let mut z = self.0 ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        Seed(z ^ (z >> 31))
    }
}

/// Binary operator for [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand side of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || expected != data.len() {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "tensor extents must be positive: {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, seed: Seed) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::BadRange { lo, hi });
        }
        let mut rng = seed.rng();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_vec(shape.to_vec(), data)
    }

    pub fn random_normal(shape: &[usize], mean: f64, std: f64, seed: Seed) -> Result<Self> {
        let normal = Normal::new(mean, std).map_err(|_| Error::BadRange { lo: mean, hi: std })?;
        let mut rng = seed.rng();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Self::from_vec(shape.to_vec(), data)
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

    pub fn last_extent(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn elementwise(&self, op: BinaryOp, rhs: Operand<'_>) -> Result<Tensor> {
        match (op, rhs) {
            (BinaryOp::Add, Operand::Tensor(b)) => self.add(b),
            (BinaryOp::Sub, Operand::Tensor(b)) => self.sub(b),
            (BinaryOp::Mul, Operand::Tensor(b)) => self.mul(b),
            (BinaryOp::Div, Operand::Tensor(b)) => self.div(b),
            (BinaryOp::Add, Operand::Scalar(s)) => Ok(self.map(|x| x + s)),
            (BinaryOp::Sub, Operand::Scalar(s)) => Ok(self.map(|x| x - s)),
            (BinaryOp::Mul, Operand::Scalar(s)) => Ok(self.scale(s)),
            (BinaryOp::Div, Operand::Scalar(s)) => {
                if s == 0.0 {
                    Err(Error::DivisionByZero { index: 0 })
                } else {
                    Ok(self.map(|x| x / s))
                }
            }
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    /// Elementwise quotient; the first zero divisor is reported by index.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        if let Some(index) = other.data.iter().position(|&d| d == 0.0) {
            return Err(Error::DivisionByZero { index });
        }
        self.zip_map(other, |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// `a * x + b` per element.
    pub fn affine(&self, a: f64, b: f64) -> Tensor {
        self.map(|x| a * x + b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// 1 where `x - threshold >= 0`, else 0.
    pub fn heaviside(&self, threshold: f64) -> Tensor {
        self.map(|x| if x - threshold >= 0.0 { 1.0 } else { 0.0 })
    }

    /// Plain `[m x k] * [k x n]` product, accumulating in ascending inner index.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: vec![0, 0],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Sums a rank-2 tensor over its rows, giving a rank-1 tensor of column totals.
    pub fn sum_rows(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: vec![0, 0],
            });
        }
        let n = self.shape[1];
        let mut out = vec![0.0; n];
        for row in self.data.chunks_exact(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Ok(Tensor {
            shape: vec![n],
            data: out,
        })
    }

    /// Splits the last axis into `groups` equal contiguous chunks.
    pub fn split_last(&self, groups: usize) -> Result<Vec<Tensor>> {
        let extent = self.last_extent();
        if groups == 0 || extent % groups != 0 {
            return Err(Error::NotDivisible { extent, groups });
        }
        let width = extent / groups;
        let rows = self.data.len() / extent;
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = width;
        Ok((0..groups)
            .map(|g| {
                let mut data = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    let start = r * extent + g * width;
                    data.extend_from_slice(&self.data[start..start + width]);
                }
                Tensor {
                    shape: shape.clone(),
                    data,
                }
            })
            .collect())
    }

    /// Joins tensors along the last axis; all other extents must agree.
    pub fn concat_last(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::ShapeMismatch {
            left: vec![],
            right: vec![],
        })?;
        let lead = &first.shape[..first.shape.len() - 1];
        for p in parts {
            if p.shape.len() != first.shape.len() || &p.shape[..p.shape.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let extent: usize = parts.iter().map(|p| p.last_extent()).sum();
        let mut data = Vec::with_capacity(rows * extent);
        for r in 0..rows {
            for p in parts {
                let w = p.last_extent();
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        *shape.last_mut().unwrap() = extent;
        Ok(Tensor { shape, data })
    }

    /// True iff `|a - b| <= atol + rtol * |b|` for every element.
    pub fn approx_equal(&self, other: &Tensor, rtol: f64, atol: f64) -> Result<bool> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .all(|(&a, &b)| (a - b).abs() <= atol + rtol * b.abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `max|a - b| / max|b|`, the norm-wise relative error used by gradient checks.
pub fn relative_error(actual: &Tensor, reference: &Tensor) -> Result<f64> {
    let diff = actual.max_abs_diff(reference)?;
    let scale = reference.max_abs();
    Ok(if scale == 0.0 { diff } else { diff / scale })
}
