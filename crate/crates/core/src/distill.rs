//! Prototype generation from a frozen teacher's embeddings.
//!
//! Teacher embeddings are computed per batch and dropped after the step, so
//! nothing per class is kept beyond what the prototype store already holds.

use crate::encoder::LinearEncoder;
use crate::error::{Error, Result};
use crate::memory::generate_prototype;
use crate::vector::UnitVector;

pub fn teacher_embed<X: AsRef<[f64]>>(
    teacher: &LinearEncoder,
    inputs: &[X],
) -> Result<Vec<UnitVector>> {
    teacher.encoder_forward(inputs)
}

/// The prototype of one class group, generated from teacher embeddings.
pub fn pmkd_generate<V: AsRef<[f64]>>(teacher_embeddings: &[V]) -> Result<UnitVector> {
    generate_prototype(teacher_embeddings)
}

/// A frozen teacher that counts the embeddings it hands out.
#[derive(Clone, Debug)]
pub struct Teacher {
    encoder: LinearEncoder,
    peak_batch_reals: usize,
    embedded: u64,
}

impl Teacher {
    /// `student_dim` is the embedding dimension the student's store uses.
    pub fn new(encoder: LinearEncoder, dim_in: usize, student_dim: usize) -> Result<Self> {
        if encoder.dim_out() != student_dim {
            return Err(Error::Config(format!(
                "teacher embeds into {} dimensions, student uses {student_dim}",
                encoder.dim_out()
            )));
        }
        if encoder.dim_in() != dim_in {
            return Err(Error::Config(format!(
                "teacher expects inputs of {} dimensions, data has {dim_in}",
                encoder.dim_in()
            )));
        }
        Ok(Teacher {
            encoder,
            peak_batch_reals: 0,
            embedded: 0,
        })
    }

    pub fn encoder(&self) -> &LinearEncoder {
        &self.encoder
    }

    pub fn embed_batch<X: AsRef<[f64]>>(&mut self, inputs: &[X]) -> Result<Vec<UnitVector>> {
        let out = teacher_embed(&self.encoder, inputs)?;
        self.peak_batch_reals = self
            .peak_batch_reals
            .max(out.len() * self.encoder.dim_out());
        self.embedded += out.len() as u64;
        Ok(out)
    }

    /// Largest number of teacher reals alive at once.
    pub fn peak_batch_reals(&self) -> usize {
        self.peak_batch_reals
    }

    pub fn embedded(&self) -> u64 {
        self.embedded
    }
}
