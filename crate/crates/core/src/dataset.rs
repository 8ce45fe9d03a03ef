//! Synthetic clustered data on the unit sphere.
//!
//! Each class has a ground-truth direction drawn uniformly on the sphere and
//! every example is `normalize(direction + sigma * n)` with `n` standard
//! normal.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::sampling::{stream_rng, LabelIndex};
use crate::vector::{normalize, ClassId, ExampleId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim_in: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Held-out examples per class for accuracy evaluation.
    #[serde(default = "default_holdout")]
    pub holdout_per_class: usize,
}

fn default_holdout() -> usize {
    5
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 || self.dim_in == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    directions: Vec<f64>,
    examples: Vec<f64>,
    index: Arc<LabelIndex>,
    holdout: Vec<f64>,
    holdout_labels: Vec<ClassId>,
}

fn random_direction<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize(&v) {
            return u.into_inner();
        }
    }
}

fn noisy_example<R: Rng>(direction: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = direction
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(u) = normalize(&v) {
            return u.into_inner();
        }
    }
}

impl SyntheticDataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim_in;
        let mut dir_rng = stream_rng(config.seed, 1);
        let directions: Vec<f64> = (0..config.num_classes)
            .flat_map(|_| random_direction(d, &mut dir_rng))
            .collect();

        let mut ex_rng = stream_rng(config.seed, 2);
        let mut examples = Vec::with_capacity(config.num_classes * config.per_class * d);
        let mut labels = Vec::with_capacity(config.num_classes * config.per_class);
        for c in 0..config.num_classes {
            let mu = &directions[c * d..(c + 1) * d];
            for _ in 0..config.per_class {
                examples.extend(noisy_example(mu, config.sigma, &mut ex_rng));
                labels.push(ClassId(c as u32));
            }
        }

        let mut ho_rng = stream_rng(config.seed, 3);
        let mut holdout = Vec::new();
        let mut holdout_labels = Vec::new();
        for c in 0..config.num_classes {
            let mu = &directions[c * d..(c + 1) * d];
            for _ in 0..config.holdout_per_class {
                holdout.extend(noisy_example(mu, config.sigma, &mut ho_rng));
                holdout_labels.push(ClassId(c as u32));
            }
        }

        Ok(SyntheticDataset {
            config: config.clone(),
            directions,
            examples,
            index: Arc::new(LabelIndex::from_labels(labels)),
            holdout,
            holdout_labels,
        })
    }

    pub fn dim_in(&self) -> usize {
        self.config.dim_in
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_examples(&self) -> usize {
        self.index.num_examples()
    }

    pub fn index(&self) -> &Arc<LabelIndex> {
        &self.index
    }

    pub fn example(&self, e: ExampleId) -> &[f64] {
        let d = self.config.dim_in;
        &self.examples[e.index() * d..(e.index() + 1) * d]
    }

    pub fn label(&self, e: ExampleId) -> ClassId {
        self.index.label(e)
    }

    pub fn direction(&self, c: ClassId) -> &[f64] {
        let d = self.config.dim_in;
        &self.directions[c.index() * d..(c.index() + 1) * d]
    }

    pub fn holdout(&self) -> impl Iterator<Item = (&[f64], ClassId)> + '_ {
        self.holdout
            .chunks_exact(self.config.dim_in)
            .zip(self.holdout_labels.iter().copied())
    }

    /// Raw example vectors as written to disk: little-endian f64, row-major.
    pub fn write_examples<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_f64s(w, &self.examples)
    }

    pub fn write_directions<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_f64s(w, &self.directions)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            num_classes: self.num_classes(),
            dim_in: self.dim_in(),
            num_examples: self.num_examples(),
            dataset: self.config.clone(),
            classes: (0..self.num_classes())
                .map(|c| {
                    let ids = self.index.members(ClassId(c as u32)).to_vec();
                    ClassEntry {
                        class_id: ClassId(c as u32),
                        count: ids.len(),
                        example_ids: ids,
                    }
                })
                .collect(),
        }
    }

    /// Rebuilds a dataset from a manifest and its raw vector files.
    pub fn from_parts<R: Read>(
        manifest: &Manifest,
        examples: &mut R,
        directions: &mut R,
    ) -> Result<Self> {
        let d = manifest.dim_in;
        let examples = io::read_f64s(examples, manifest.num_examples * d)?;
        let directions = io::read_f64s(directions, manifest.num_classes * d)?;
        let mut labels = vec![ClassId(0); manifest.num_examples];
        for entry in &manifest.classes {
            for e in &entry.example_ids {
                *labels
                    .get_mut(e.index())
                    .ok_or_else(|| Error::Checkpoint(format!("example id {e} out of range")))? =
                    entry.class_id;
            }
        }
        let mut fresh = SyntheticDataset::generate(&manifest.dataset)?;
        fresh.examples = examples;
        fresh.directions = directions;
        fresh.index = Arc::new(LabelIndex::from_labels(labels));
        Ok(fresh)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: ClassId,
    pub count: usize,
    pub example_ids: Vec<ExampleId>,
}

/// JSON description of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub dim_in: usize,
    pub num_examples: usize,
    pub dataset: DatasetConfig,
    pub classes: Vec<ClassEntry>,
}
