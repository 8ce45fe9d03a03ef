//! Unit vectors on the embedding hypersphere and the ids that label them.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`normalize`].
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExampleId(pub u32);

impl ClassId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ExampleId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ExampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An L2-normalized direction. The only way to build one is through
/// [`normalize`] (or [`UnitVector::new`]), so the norm invariant holds for
/// every value of this type.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        normalize_owned(components)
    }

    /// Wraps a vector already known to be unit length without re-dividing it,
    /// so stored unit vectors pass through bit for bit.
    pub(crate) fn assume_unit(components: Vec<f64>) -> Self {
        debug_assert!((norm(&components) - 1.0).abs() < 1e-6);
        UnitVector(components)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    /// Basis vector `e_axis` in `dim` dimensions.
    pub fn axis(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        UnitVector(v)
    }
}

impl Deref for UnitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `v / ||v||`, failing with [`Error::ZeroVector`] when `||v|| < 1e-12`.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    normalize_owned(v.to_vec())
}

fn normalize_owned(mut v: Vec<f64>) -> Result<UnitVector> {
    let n = norm(&v);
    if n.is_nan() || n < ZERO_NORM || !n.is_finite() {
        return Err(Error::ZeroVector { norm: n });
    }
    for x in &mut v {
        *x /= n;
    }
    Ok(UnitVector(v))
}

/// Normalized mean of a set of equal-length vectors.
pub fn normalized_mean<V: AsRef<[f64]>>(vectors: &[V]) -> Result<UnitVector> {
    let first = vectors.first().ok_or(Error::ZeroVector { norm: 0.0 })?;
    let dim = first.as_ref().len();
    let mut acc = vec![0.0; dim];
    for v in vectors {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let k = vectors.len() as f64;
    for a in &mut acc {
        *a /= k;
    }
    normalize_owned(acc)
}
