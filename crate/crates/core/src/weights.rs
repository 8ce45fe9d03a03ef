//! Read-only view of a block of classifier weights.
//!
//! Losses never own prototypes. They read them through a [`WeightView`]
//! that borrows whichever buffer currently holds them: the prototype memory
//! itself, or the active block a sampled-softmax baseline copied in this
//! step. Rows are addressed by snapshot position, which is what a
//! [`crate::LogitsRow`] target index refers to.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::vector::{dot, ClassId, UnitVector};

#[derive(Clone, Debug)]
pub struct WeightView<'a> {
    dim: usize,
    buffer: &'a [f64],
    ids: Vec<ClassId>,
    rows: Vec<usize>,
    position: HashMap<ClassId, usize>,
}

impl<'a> WeightView<'a> {
    /// View where row `j` of `buffer` belongs to `ids[j]`.
    pub fn dense(dim: usize, ids: Vec<ClassId>, buffer: &'a [f64]) -> Result<Self> {
        if buffer.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                got: buffer.len(),
            });
        }
        let rows = (0..ids.len()).collect();
        Self::build(dim, buffer, ids, rows)
    }

    /// View over scattered rows (`rows[j]` is the row index inside `buffer`).
    pub fn scattered(
        dim: usize,
        buffer: &'a [f64],
        ids: Vec<ClassId>,
        rows: Vec<usize>,
    ) -> Result<Self> {
        if rows.iter().any(|&r| (r + 1) * dim > buffer.len()) {
            return Err(Error::DimensionMismatch {
                expected: buffer.len(),
                got: rows.len() * dim,
            });
        }
        Self::build(dim, buffer, ids, rows)
    }

    fn build(dim: usize, buffer: &'a [f64], ids: Vec<ClassId>, rows: Vec<usize>) -> Result<Self> {
        assert_eq!(ids.len(), rows.len());
        let mut position = HashMap::with_capacity(ids.len());
        for (j, id) in ids.iter().enumerate() {
            if position.insert(*id, j).is_some() {
                return Err(Error::DuplicateClass(*id));
            }
        }
        Ok(WeightView {
            dim,
            buffer,
            ids,
            rows,
            position,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn class_at(&self, j: usize) -> ClassId {
        self.ids[j]
    }

    pub fn position(&self, class: ClassId) -> Option<usize> {
        self.position.get(&class).copied()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.position.contains_key(&class)
    }

    #[inline]
    pub fn row(&self, j: usize) -> &'a [f64] {
        let start = self.rows[j] * self.dim;
        &self.buffer[start..start + self.dim]
    }

    /// Raw dot products of `x` with every row, in snapshot order.
    pub fn similarities(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.similarities_into(x, &mut out);
        out
    }

    pub fn similarities_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.len()).map(|j| dot(self.row(j), x)));
    }

    /// Owned copy of the rows, in view order.
    pub fn to_owned_rows(&self) -> Vec<(ClassId, UnitVector)> {
        (0..self.len())
            .map(|j| (self.ids[j], UnitVector::assume_unit(self.row(j).to_vec())))
            .collect()
    }
}
