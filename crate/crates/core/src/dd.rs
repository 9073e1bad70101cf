//! Double-double arithmetic: a value is carried as an unevaluated sum
//! `hi + lo` with `|lo| <= ulp(hi) / 2`, giving about 106 bits of precision.
//!
//! The reversible node keeps its membrane potentials in this form. The
//! leaky update contracts the potential, so a plain `f64` forward pass maps
//! several distinct `V^{t-1}` onto the same rounded `V^t` and the inverse
//! cannot tell them apart; the extra word keeps the map injective far below
//! any tolerance of interest.

use crate::tensor::Tensor;

/// `(hi, lo)` pair.
pub type Dd = (f64, f64);

#[inline]
pub fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
pub fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

#[inline]
pub fn add(a: Dd, b: Dd) -> Dd {
    let (s, e) = two_sum(a.0, b.0);
    let (t, f) = two_sum(a.1, b.1);
    let (s, e) = quick_two_sum(s, e + t);
    quick_two_sum(s, e + f)
}

#[inline]
pub fn neg(a: Dd) -> Dd {
    (-a.0, -a.1)
}

#[inline]
pub fn sub(a: Dd, b: Dd) -> Dd {
    add(a, neg(b))
}

#[inline]
pub fn add_f(a: Dd, b: f64) -> Dd {
    let (s, e) = two_sum(a.0, b);
    quick_two_sum(s, e + a.1)
}

#[inline]
pub fn mul(a: Dd, b: Dd) -> Dd {
    let (p, e) = two_prod(a.0, b.0);
    quick_two_sum(p, e + (a.0 * b.1 + a.1 * b.0))
}

#[inline]
pub fn mul_f(a: Dd, b: f64) -> Dd {
    let (p, e) = two_prod(a.0, b);
    quick_two_sum(p, e + a.1 * b)
}

#[inline]
pub fn div(a: Dd, b: Dd) -> Dd {
    let q1 = a.0 / b.0;
    let r = sub(a, mul_f(b, q1));
    let q2 = r.0 / b.0;
    let r = sub(r, mul_f(b, q2));
    let q3 = r.0 / b.0;
    add_f(quick_two_sum(q1, q2), q3)
}

/// Nearest `f64` to the pair (correct sign even when `hi` is zero).
#[inline]
pub fn to_f64(a: Dd) -> f64 {
    a.0 + a.1
}

/// A tensor of double-double values.
#[derive(Debug, Clone, PartialEq)]
pub struct DdTensor {
    pub hi: Tensor,
    pub lo: Tensor,
}

impl DdTensor {
    pub fn from_tensor(t: Tensor) -> Self {
        let lo = Tensor::zeros(t.shape());
        Self { hi: t, lo }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_tensor(Tensor::zeros(shape))
    }

    pub fn shape(&self) -> &[usize] {
        self.hi.shape()
    }

    pub fn len(&self) -> usize {
        self.hi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hi.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> Dd {
        (self.hi.data()[i], self.lo.data()[i])
    }

    /// Rounded to the nearest `f64` per element. Every operation here leaves
    /// its result normalized, so this equals `hi`.
    pub fn to_tensor(&self) -> Tensor {
        self.hi.zip_map(&self.lo, |h, l| h + l).expect("hi and lo share a shape")
    }

    /// Builds a tensor of `shape` from `f(i)` per element.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> Dd) -> Self {
        let n: usize = shape.iter().product();
        let (hi, lo): (Vec<f64>, Vec<f64>) = (0..n).map(f).unzip();
        Self {
            hi: Tensor::from_vec(shape.to_vec(), hi).expect("shape product matches"),
            lo: Tensor::from_vec(shape.to_vec(), lo).expect("shape product matches"),
        }
    }

    pub fn split_last(&self, groups: usize) -> crate::Result<Vec<DdTensor>> {
        Ok(self
            .hi
            .split_last(groups)?
            .into_iter()
            .zip(self.lo.split_last(groups)?)
            .map(|(hi, lo)| DdTensor { hi, lo })
            .collect())
    }

    pub fn concat_last(parts: &[DdTensor]) -> crate::Result<DdTensor> {
        let hi: Vec<Tensor> = parts.iter().map(|p| p.hi.clone()).collect();
        let lo: Vec<Tensor> = parts.iter().map(|p| p.lo.clone()).collect();
        Ok(DdTensor {
            hi: Tensor::concat_last(&hi)?,
            lo: Tensor::concat_last(&lo)?,
        })
    }
}
