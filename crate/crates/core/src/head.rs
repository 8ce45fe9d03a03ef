//! Classifier heads: where the weights a loss is computed against come from.
//!
//! Every training system (prototype memory and each baseline) is a
//! [`ClassifierHead`]. Per step the loop hands the head the batch's classes
//! with the embeddings that should generate their prototypes, reads the
//! resulting weights through [`ClassifierHead::view`], and returns the
//! prototype gradients the loss produced.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::memory::{generate_prototype, PrototypeStore, Upsert};
use crate::vector::ClassId;
use crate::weights::WeightView;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    #[default]
    Pm,
    Pprn,
    #[serde(rename = "dsoftmaxk")]
    DSoftmaxK,
    Full,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [
        SystemKind::Pm,
        SystemKind::Pprn,
        SystemKind::DSoftmaxK,
        SystemKind::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Pm => "pm",
            SystemKind::Pprn => "pprn",
            SystemKind::DSoftmaxK => "dsoftmaxk",
            SystemKind::Full => "full",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SystemKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown system `{s}`"))
    }
}

/// Reals of classifier state on the accelerator side and in host memory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub device_resident_reals: usize,
    pub persistent_reals: usize,
}

/// A class in the batch with the embeddings its prototype is generated from.
#[derive(Clone, Debug)]
pub struct ClassBatch<'a> {
    pub class: ClassId,
    pub embeddings: Vec<&'a [f64]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrepareReport {
    pub refreshed: usize,
    pub enqueued: usize,
    pub evicted: Vec<ClassId>,
    /// Classes whose weights were updated from data this step.
    pub touched: Vec<ClassId>,
    pub transfer_bytes: u64,
}

pub trait ClassifierHead {
    fn kind(&self) -> SystemKind;

    fn dim(&self) -> usize;

    /// Makes every class of the batch available (generating, refreshing or
    /// sampling weights as the system does) before the loss is computed.
    fn prepare(&mut self, classes: &[ClassBatch<'_>], step: u64) -> Result<PrepareReport>;

    /// The weights the loss sees this step.
    fn view(&self) -> WeightView<'_>;

    fn apply_gradients(
        &mut self,
        grads: &BTreeMap<ClassId, Vec<f64>>,
        learning_rate: f64,
    ) -> Result<()>;

    /// Number of prototypes the classifier currently exposes.
    fn occupancy(&self) -> usize;

    /// Residency by formula.
    fn memory_report(&self) -> MemoryReport;

    /// Residency read back from the live allocations.
    fn instrumented_memory(&self) -> MemoryReport;

    /// The persisted weight of a class, for systems that keep one per class.
    fn stored_prototype(&self, class: ClassId) -> Option<&[f64]>;
}

/// Prototype memory: prototypes generated from the batch, refreshed with
/// ratio `r` when already present, disposed of oldest-first.
#[derive(Clone, Debug)]
pub struct PrototypeMemoryHead {
    pub store: PrototypeStore,
    pub refresh_ratio: f64,
}

impl PrototypeMemoryHead {
    pub fn new(dim: usize, capacity: usize, refresh_ratio: f64) -> Self {
        PrototypeMemoryHead {
            store: PrototypeStore::new(dim, capacity),
            refresh_ratio,
        }
    }
}

impl ClassifierHead for PrototypeMemoryHead {
    fn kind(&self) -> SystemKind {
        SystemKind::Pm
    }

    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn prepare(&mut self, classes: &[ClassBatch<'_>], step: u64) -> Result<PrepareReport> {
        let mut report = PrepareReport::default();
        for cb in classes {
            let p_new = generate_prototype(&cb.embeddings)?;
            match self
                .store
                .upsert(cb.class, &p_new, self.refresh_ratio, step)?
            {
                Upsert::Refreshed => report.refreshed += 1,
                Upsert::Enqueued { evicted } => {
                    report.enqueued += 1;
                    report.evicted.extend(evicted);
                }
            }
            report.touched.push(cb.class);
        }
        Ok(report)
    }

    fn view(&self) -> WeightView<'_> {
        self.store.view()
    }

    fn apply_gradients(
        &mut self,
        grads: &BTreeMap<ClassId, Vec<f64>>,
        learning_rate: f64,
    ) -> Result<()> {
        self.store
            .apply_gradients(grads.iter().map(|(c, g)| (*c, g)), learning_rate)
    }

    fn occupancy(&self) -> usize {
        self.store.len()
    }

    fn memory_report(&self) -> MemoryReport {
        MemoryReport {
            device_resident_reals: self.store.capacity() * self.store.dim(),
            persistent_reals: 0,
        }
    }

    fn instrumented_memory(&self) -> MemoryReport {
        MemoryReport {
            device_resident_reals: self.store.allocated_reals(),
            persistent_reals: 0,
        }
    }

    fn stored_prototype(&self, class: ClassId) -> Option<&[f64]> {
        self.store.get(class)
    }
}
