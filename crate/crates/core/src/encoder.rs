//! Linear encoder followed by L2 normalization.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io;
use crate::vector::{dot, norm, UnitVector, ZERO_NORM};

/// `x -> normalize(W^T x)` with `W` stored row-major as `dim_in x dim_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEncoder {
    dim_in: usize,
    dim_out: usize,
    weights: Vec<f64>,
}

impl LinearEncoder {
    pub fn from_weights(dim_in: usize, dim_out: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != dim_in * dim_out {
            return Err(Error::DimensionMismatch {
                expected: dim_in * dim_out,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("encoder weights must be finite".into()));
        }
        Ok(LinearEncoder {
            dim_in,
            dim_out,
            weights,
        })
    }

    /// Gaussian entries with variance `1 / dim_in`.
    pub fn random<R: Rng + ?Sized>(dim_in: usize, dim_out: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim_in as f64).sqrt();
        let weights = (0..dim_in * dim_out)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        LinearEncoder {
            dim_in,
            dim_out,
            weights,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        LinearEncoder {
            dim_in: dim,
            dim_out: dim,
            weights,
        }
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `W^T x`, before normalization.
    pub fn forward_raw(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim_in);
        let mut out = vec![0.0; self.dim_out];
        for (xi, row) in x.iter().zip(self.weights.chunks_exact(self.dim_out)) {
            if *xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Result<UnitVector> {
        UnitVector::new(self.forward_raw(x))
    }

    pub fn encoder_forward<X: AsRef<[f64]>>(&self, inputs: &[X]) -> Result<Vec<UnitVector>> {
        inputs.iter().map(|x| self.forward(x.as_ref())).collect()
    }

    /// Weight gradient given dL/d(raw output) per input: `sum_i x_i g_i^T`.
    pub fn backward_raw<X: AsRef<[f64]>, G: AsRef<[f64]>>(
        &self,
        inputs: &[X],
        d_raw: &[G],
    ) -> Vec<f64> {
        assert_eq!(inputs.len(), d_raw.len());
        let mut grad = vec![0.0; self.weights.len()];
        for (x, g) in inputs.iter().zip(d_raw) {
            let g = g.as_ref();
            for (xi, row) in x.as_ref().iter().zip(grad.chunks_exact_mut(self.dim_out)) {
                for (r, gj) in row.iter_mut().zip(g) {
                    *r += xi * gj;
                }
            }
        }
        grad
    }

    /// Weight gradient given dL/d(normalized output) per input.
    pub fn encoder_backward<X: AsRef<[f64]>, G: AsRef<[f64]>>(
        &self,
        inputs: &[X],
        d_embeddings: &[G],
    ) -> Result<Vec<f64>> {
        let d_raw = inputs
            .iter()
            .zip(d_embeddings)
            .map(|(x, g)| {
                let raw = self.forward_raw(x.as_ref());
                project_through_normalization(&raw, g.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.backward_raw(inputs, &d_raw))
    }

    pub fn sgd_step(&mut self, grad: &[f64], learning_rate: f64) {
        assert_eq!(grad.len(), self.weights.len());
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= learning_rate * g;
        }
    }

    /// `u64 dim_in, u64 dim_out`, then the weights row-major as f64, little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_u64(w, self.dim_in as u64)?;
        io::write_u64(w, self.dim_out as u64)?;
        io::write_f64s(w, &self.weights)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let dim_in = io::read_len(r, "dim_in", 1 << 20)?;
        let dim_out = io::read_len(r, "dim_out", 1 << 20)?;
        let weights = io::read_f64s(r, dim_in * dim_out)?;
        Self::from_weights(dim_in, dim_out, weights)
    }
}

/// Chain rule through `y = raw / ||raw||`: `(g - (g . y) y) / ||raw||`.
pub fn project_through_normalization(raw: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let r = norm(raw);
    if r.is_nan() || r < ZERO_NORM {
        return Err(Error::ZeroVector { norm: r });
    }
    let radial = dot(g, raw) / r;
    Ok(g.iter()
        .zip(raw)
        .map(|(gi, yi)| (gi - radial * yi / r) / r)
        .collect())
}
