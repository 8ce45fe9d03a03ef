//! Sampled softmax baselines that keep one weight per class.
//!
//! PPRN and D-Softmax-K persist the full `N_c x D` weight matrix in host
//! memory and, every step, copy the rows of the batch's classes plus uniform
//! random negatives into an active block that the loss trains. Rows left out
//! of the sample are not touched, which is what lets them drift away from
//! their class as the encoder moves on. Full softmax keeps every row active.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{ClassBatch, ClassifierHead, MemoryReport, PrepareReport, SystemKind};
use crate::io;
use crate::losses::{LossGrad, MarginLoss};
use crate::vector::{normalize, ClassId, UnitVector};
use crate::weights::WeightView;

/// One unit-norm weight row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct FullWeightMatrix {
    dim: usize,
    num_classes: usize,
    weights: Vec<f64>,
}

impl FullWeightMatrix {
    /// Rows drawn uniformly on the sphere.
    pub fn random<R: Rng + ?Sized>(num_classes: usize, dim: usize, rng: &mut R) -> Self {
        let mut weights = Vec::with_capacity(num_classes * dim);
        for _ in 0..num_classes {
            loop {
                let v: Vec<f64> = (0..dim)
                    .map(|_| rng.sample(rand_distr::StandardNormal))
                    .collect();
                if let Ok(u) = normalize(&v) {
                    weights.extend_from_slice(&u);
                    break;
                }
            }
        }
        FullWeightMatrix {
            dim,
            num_classes,
            weights,
        }
    }

    pub fn from_rows(rows: &[UnitVector]) -> Self {
        let dim = rows.first().map_or(0, |r| r.dim());
        FullWeightMatrix {
            dim,
            num_classes: rows.len(),
            weights: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, class: ClassId) -> &[f64] {
        &self.weights[class.index() * self.dim..(class.index() + 1) * self.dim]
    }

    pub fn set_row(&mut self, class: ClassId, v: &[f64]) {
        let d = self.dim;
        self.weights[class.index() * d..(class.index() + 1) * d].copy_from_slice(v);
    }

    pub fn allocated_reals(&self) -> usize {
        self.weights.capacity()
    }

    pub fn dense_view(&self) -> WeightView<'_> {
        let ids = (0..self.num_classes as u32).map(ClassId).collect();
        WeightView::dense(self.dim, ids, &self.weights).expect("matrix shape is consistent")
    }

    /// Copies the listed rows into `active` (cleared first) and returns the
    /// number of bytes moved.
    pub fn gather(&self, ids: &[ClassId], active: &mut Vec<f64>) -> u64 {
        active.clear();
        for &c in ids {
            active.extend_from_slice(self.row(c));
        }
        (ids.len() * self.dim * std::mem::size_of::<f64>()) as u64
    }

    /// Checkpoint: class count and dimension as u64, then the rows.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_u64(w, self.num_classes as u64)?;
        io::write_u64(w, self.dim as u64)?;
        io::write_f64s(w, &self.weights)
    }
}

/// Positives plus uniform random negatives, `sample_size` distinct classes
/// in total. Positives come first, in the order given.
pub fn pprn_sample<R: Rng + ?Sized>(
    num_classes: usize,
    batch_classes: &[ClassId],
    sample_size: usize,
    rng: &mut R,
) -> Result<Vec<ClassId>> {
    if sample_size > num_classes {
        return Err(Error::InsufficientClasses {
            requested: sample_size,
            available: num_classes,
        });
    }
    let mut positives: Vec<ClassId> = Vec::with_capacity(batch_classes.len());
    for &c in batch_classes {
        if !positives.contains(&c) {
            positives.push(c);
        }
    }
    if positives.len() > sample_size {
        return Err(Error::Config(format!(
            "sample size {sample_size} is smaller than the {} classes in the batch",
            positives.len()
        )));
    }
    let mut sorted: Vec<u32> = positives.iter().map(|c| c.0).collect();
    sorted.sort_unstable();
    let need = sample_size - positives.len();
    let picks = rand::seq::index::sample(rng, num_classes - sorted.len(), need);
    let mut out = positives;
    // Map the i-th free index to the i-th class id that is not a positive.
    out.extend(picks.iter().map(|v| {
        let mut r = v as u32;
        for &p in &sorted {
            if p <= r {
                r += 1;
            } else {
                break;
            }
        }
        ClassId(r)
    }));
    Ok(out)
}

/// D-Softmax-K draws its classes exactly like PPRN; only the loss differs.
pub fn dsoftmaxk_sample<R: Rng + ?Sized>(
    num_classes: usize,
    batch_classes: &[ClassId],
    sample_size: usize,
    rng: &mut R,
) -> Result<Vec<ClassId>> {
    pprn_sample(num_classes, batch_classes, sample_size, rng)
}

fn sgd_rows(
    view: &WeightView<'_>,
    grads: &BTreeMap<ClassId, Vec<f64>>,
    learning_rate: f64,
) -> Result<Vec<(ClassId, usize, UnitVector)>> {
    grads
        .iter()
        .map(|(c, g)| {
            let j = view.position(*c).ok_or(Error::MissingClass(*c))?;
            let moved: Vec<f64> = view
                .row(j)
                .iter()
                .zip(g)
                .map(|(w, g)| w - learning_rate * g)
                .collect();
            Ok((*c, j, normalize(&moved)?))
        })
        .collect()
}

/// One sampled-softmax classifier update: loss over the sampled rows, SGD on
/// exactly those rows, everything else untouched.
pub fn baseline_step<E: AsRef<[f64]>>(
    matrix: &mut FullWeightMatrix,
    embeddings: &[E],
    labels: &[ClassId],
    sampled: &[ClassId],
    loss: &MarginLoss,
    learning_rate: f64,
) -> Result<LossGrad> {
    let mut active = Vec::with_capacity(sampled.len() * matrix.dim());
    matrix.gather(sampled, &mut active);
    let view = WeightView::dense(matrix.dim(), sampled.to_vec(), &active)?;
    let targets: Vec<Option<usize>> = labels.iter().map(|c| view.position(*c)).collect();
    let grad = loss.backward(embeddings, &targets, &view)?;
    for (c, _, row) in sgd_rows(&view, &grad.d_prototypes, learning_rate)? {
        matrix.set_row(c, &row);
    }
    Ok(grad)
}

/// PPRN or D-Softmax-K: a host-resident full matrix and a per-step active block.
#[derive(Clone, Debug)]
pub struct SampledSoftmaxHead {
    kind: SystemKind,
    matrix: FullWeightMatrix,
    sample_size: usize,
    active: Vec<f64>,
    active_ids: Vec<ClassId>,
    rng: ChaCha8Rng,
}

impl SampledSoftmaxHead {
    pub fn new(
        kind: SystemKind,
        matrix: FullWeightMatrix,
        sample_size: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        assert!(matches!(kind, SystemKind::Pprn | SystemKind::DSoftmaxK));
        if sample_size > matrix.num_classes() {
            return Err(Error::InsufficientClasses {
                requested: sample_size,
                available: matrix.num_classes(),
            });
        }
        let active = Vec::with_capacity(sample_size * matrix.dim());
        Ok(SampledSoftmaxHead {
            kind,
            matrix,
            sample_size,
            active,
            active_ids: Vec::new(),
            rng,
        })
    }

    pub fn matrix(&self) -> &FullWeightMatrix {
        &self.matrix
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size
    }
}

impl ClassifierHead for SampledSoftmaxHead {
    fn kind(&self) -> SystemKind {
        self.kind
    }

    fn dim(&self) -> usize {
        self.matrix.dim()
    }

    fn prepare(&mut self, classes: &[ClassBatch<'_>], _step: u64) -> Result<PrepareReport> {
        let positives: Vec<ClassId> = classes.iter().map(|c| c.class).collect();
        self.active_ids = pprn_sample(
            self.matrix.num_classes(),
            &positives,
            self.sample_size,
            &mut self.rng,
        )?;
        let transfer_bytes = self.matrix.gather(&self.active_ids, &mut self.active);
        Ok(PrepareReport {
            touched: self.active_ids.clone(),
            transfer_bytes,
            ..Default::default()
        })
    }

    fn view(&self) -> WeightView<'_> {
        WeightView::dense(self.matrix.dim(), self.active_ids.clone(), &self.active)
            .expect("active block matches ids")
    }

    fn apply_gradients(
        &mut self,
        grads: &BTreeMap<ClassId, Vec<f64>>,
        learning_rate: f64,
    ) -> Result<()> {
        let rows = sgd_rows(&self.view(), grads, learning_rate)?;
        let d = self.matrix.dim();
        for (c, j, row) in rows {
            // Keep the active copy in sync and write back to the host matrix.
            self.active[j * d..(j + 1) * d].copy_from_slice(&row);
            self.matrix.set_row(c, &row);
        }
        Ok(())
    }

    fn occupancy(&self) -> usize {
        self.active_ids.len()
    }

    fn memory_report(&self) -> MemoryReport {
        let d = self.matrix.dim();
        MemoryReport {
            device_resident_reals: self.sample_size * d,
            persistent_reals: self.matrix.num_classes() * d,
        }
    }

    fn instrumented_memory(&self) -> MemoryReport {
        MemoryReport {
            device_resident_reals: self.active.capacity(),
            persistent_reals: self.matrix.allocated_reals(),
        }
    }

    fn stored_prototype(&self, class: ClassId) -> Option<&[f64]> {
        (class.index() < self.matrix.num_classes()).then(|| self.matrix.row(class))
    }
}

/// Every class weight resident and trained every step.
#[derive(Clone, Debug)]
pub struct FullSoftmaxHead {
    matrix: FullWeightMatrix,
}

impl FullSoftmaxHead {
    pub fn new(matrix: FullWeightMatrix) -> Self {
        FullSoftmaxHead { matrix }
    }

    pub fn matrix(&self) -> &FullWeightMatrix {
        &self.matrix
    }
}

impl ClassifierHead for FullSoftmaxHead {
    fn kind(&self) -> SystemKind {
        SystemKind::Full
    }

    fn dim(&self) -> usize {
        self.matrix.dim()
    }

    fn prepare(&mut self, _classes: &[ClassBatch<'_>], _step: u64) -> Result<PrepareReport> {
        let touched = (0..self.matrix.num_classes() as u32).map(ClassId).collect();
        Ok(PrepareReport {
            touched,
            ..Default::default()
        })
    }

    fn view(&self) -> WeightView<'_> {
        self.matrix.dense_view()
    }

    fn apply_gradients(
        &mut self,
        grads: &BTreeMap<ClassId, Vec<f64>>,
        learning_rate: f64,
    ) -> Result<()> {
        let rows = sgd_rows(&self.view(), grads, learning_rate)?;
        for (c, _, row) in rows {
            self.matrix.set_row(c, &row);
        }
        Ok(())
    }

    fn occupancy(&self) -> usize {
        self.matrix.num_classes()
    }

    fn memory_report(&self) -> MemoryReport {
        MemoryReport {
            device_resident_reals: self.matrix.num_classes() * self.matrix.dim(),
            persistent_reals: 0,
        }
    }

    fn instrumented_memory(&self) -> MemoryReport {
        MemoryReport {
            device_resident_reals: self.matrix.allocated_reals(),
            persistent_reals: 0,
        }
    }

    fn stored_prototype(&self, class: ClassId) -> Option<&[f64]> {
        (class.index() < self.matrix.num_classes()).then(|| self.matrix.row(class))
    }
}
