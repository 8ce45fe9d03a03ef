//! The prototype memory: a bounded, recency-ordered store of class prototypes.
//!
//! Prototypes live in a fixed slab of `M * D` reals allocated up front, so the
//! store's residency is exactly `M * D` regardless of how many classes pass
//! through it. Recency is a monotone sequence number: enqueue and refresh
//! stamp the entry with a fresh number (moving it to the head of the queue),
//! and disposal removes the entry with the smallest number (the tail).
//! Gradient updates change the stored vector but never its position.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io;
use crate::vector::{normalize, normalized_mean, ClassId, UnitVector};
use crate::weights::WeightView;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Entry {
    slot: usize,
    seq: u64,
    last_refresh_step: u64,
}

#[derive(Clone, Debug)]
pub struct PrototypeStore {
    dim: usize,
    capacity: usize,
    slab: Vec<f64>,
    free: Vec<usize>,
    index: HashMap<ClassId, Entry>,
    /// seq -> class; the largest seq is the queue head.
    order: BTreeMap<u64, ClassId>,
    next_seq: u64,
}

/// Prototype generation: the normalized mean of a class group's
/// embeddings.
pub fn generate_prototype<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<UnitVector> {
    normalized_mean(embeddings)
}

/// Refresh blend `normalize(r * new + (1 - r) * old)` of two unit vectors.
/// The endpoints return their operand unchanged.
pub fn blend(old: &[f64], new: &[f64], r: f64) -> Result<UnitVector> {
    if r == 0.0 {
        return Ok(UnitVector::assume_unit(old.to_vec()));
    }
    if r == 1.0 {
        return Ok(UnitVector::assume_unit(new.to_vec()));
    }
    let mixed: Vec<f64> = old
        .iter()
        .zip(new)
        .map(|(o, n)| r * n + (1.0 - r) * o)
        .collect();
    normalize(&mixed)
}

impl PrototypeStore {
    pub fn new(dim: usize, capacity: usize) -> Self {
        assert!(
            dim > 0 && capacity > 0,
            "store needs positive dimension and capacity"
        );
        PrototypeStore {
            dim,
            capacity,
            slab: vec![0.0; dim * capacity],
            free: (0..capacity).rev().collect(),
            index: HashMap::with_capacity(capacity),
            order: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.capacity
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.index.contains_key(&class)
    }

    pub fn get(&self, class: ClassId) -> Option<&[f64]> {
        self.index.get(&class).map(|e| self.slot(e.slot))
    }

    pub fn last_refresh_step(&self, class: ClassId) -> Option<u64> {
        self.index.get(&class).map(|e| e.last_refresh_step)
    }

    /// Class ids from head (most recent) to tail (oldest).
    pub fn recency_order(&self) -> Vec<ClassId> {
        self.order.values().rev().copied().collect()
    }

    /// The entry next in line for disposal.
    pub fn tail(&self) -> Option<ClassId> {
        self.order.values().next().copied()
    }

    /// Reals held by the prototype slab, read from the allocation itself.
    pub fn allocated_reals(&self) -> usize {
        self.slab.capacity()
    }

    fn slot(&self, slot: usize) -> &[f64] {
        &self.slab[slot * self.dim..(slot + 1) * self.dim]
    }

    fn write_slot(&mut self, slot: usize, v: &[f64]) {
        self.slab[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(v);
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got == self.dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim,
                got,
            })
        }
    }

    fn stamp(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    /// Inserts a new prototype at the head of the queue. When the store is
    /// full, the tail entry is disposed of first and its class returned.
    pub fn enqueue(
        &mut self,
        class: ClassId,
        prototype: &UnitVector,
        step: u64,
    ) -> Result<Option<ClassId>> {
        self.check_dim(prototype.dim())?;
        if self.contains(class) {
            return Err(Error::DuplicateClass(class));
        }
        let evicted = if self.is_full() {
            self.dispose_tail()
        } else {
            None
        };
        let slot = self.free.pop().expect("a slot is free after disposal");
        self.write_slot(slot, prototype);
        let seq = self.stamp();
        self.order.insert(seq, class);
        self.index.insert(
            class,
            Entry {
                slot,
                seq,
                last_refresh_step: step,
            },
        );
        Ok(evicted)
    }

    fn dispose_tail(&mut self) -> Option<ClassId> {
        let (_, class) = self.order.pop_first()?;
        let entry = self.index.remove(&class).expect("order and index agree");
        self.free.push(entry.slot);
        Some(class)
    }

    /// Blends a freshly generated prototype into the stored one and moves the
    /// entry to the head of the queue. On a degenerate blend the entry is left
    /// untouched.
    pub fn refresh(
        &mut self,
        class: ClassId,
        new_prototype: &UnitVector,
        r: f64,
        step: u64,
    ) -> Result<UnitVector> {
        self.check_dim(new_prototype.dim())?;
        let entry = *self.index.get(&class).ok_or(Error::MissingClass(class))?;
        let updated = blend(self.slot(entry.slot), new_prototype, r)?;
        self.write_slot(entry.slot, &updated);
        self.order.remove(&entry.seq);
        let seq = self.stamp();
        self.order.insert(seq, class);
        self.index.insert(
            class,
            Entry {
                slot: entry.slot,
                seq,
                last_refresh_step: step,
            },
        );
        Ok(updated)
    }

    /// Refreshes `class` if present, enqueues it otherwise.
    pub fn upsert(
        &mut self,
        class: ClassId,
        prototype: &UnitVector,
        r: f64,
        step: u64,
    ) -> Result<Upsert> {
        if self.contains(class) {
            self.refresh(class, prototype, r, step)?;
            Ok(Upsert::Refreshed)
        } else {
            Ok(Upsert::Enqueued {
                evicted: self.enqueue(class, prototype, step)?,
            })
        }
    }

    /// One SGD step `p <- normalize(p - lr * g)` per listed class. Either every
    /// update is applied or none is. Queue order is not affected.
    pub fn apply_gradients<I, G>(&mut self, updates: I, learning_rate: f64) -> Result<()>
    where
        I: IntoIterator<Item = (ClassId, G)>,
        G: AsRef<[f64]>,
    {
        let mut staged = Vec::new();
        for (class, grad) in updates {
            let grad = grad.as_ref();
            self.check_dim(grad.len())?;
            let entry = self.index.get(&class).ok_or(Error::MissingClass(class))?;
            let moved: Vec<f64> = self
                .slot(entry.slot)
                .iter()
                .zip(grad)
                .map(|(p, g)| p - learning_rate * g)
                .collect();
            staged.push((entry.slot, normalize(&moved)?));
        }
        for (slot, p) in staged {
            self.write_slot(slot, &p);
        }
        Ok(())
    }

    /// Point-in-time copy of all prototypes, head first.
    pub fn snapshot_weights(&self) -> Vec<(ClassId, UnitVector)> {
        self.view().to_owned_rows()
    }

    /// Borrowed classifier view over the slab, head first.
    pub fn view(&self) -> WeightView<'_> {
        let ids = self.recency_order();
        let rows = ids.iter().map(|c| self.index[c].slot).collect();
        WeightView::scattered(self.dim, &self.slab, ids, rows)
            .expect("store is internally consistent")
    }

    /// Binary checkpoint: `D, M, count` as u64, then per entry (head first)
    /// `class_id: u64, last_refresh_step: u64, D x f64`, all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_u64(w, self.dim as u64)?;
        io::write_u64(w, self.capacity as u64)?;
        io::write_u64(w, self.len() as u64)?;
        for class in self.recency_order() {
            let e = self.index[&class];
            io::write_u64(w, u64::from(class.0))?;
            io::write_u64(w, e.last_refresh_step)?;
            io::write_f64s(w, self.slot(e.slot))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let dim = io::read_len(r, "D", 1 << 20)?;
        let capacity = io::read_len(r, "M", 1 << 32)?;
        let count = io::read_len(r, "count", capacity as u64)?;
        if dim == 0 || capacity == 0 {
            return Err(Error::Checkpoint("D and M must be positive".into()));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let class = io::read_u64(r)?;
            let class = u32::try_from(class)
                .map_err(|_| Error::Checkpoint(format!("class id {class} out of range")))?;
            let step = io::read_u64(r)?;
            let v = io::read_f64s(r, dim)?;
            let n = crate::vector::norm(&v);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Checkpoint(format!(
                    "prototype of class {class} has norm {n}"
                )));
            }
            entries.push((ClassId(class), step, v));
        }
        let mut store = PrototypeStore::new(dim, capacity);
        // Stored head first; re-insert tail first so the order comes back intact.
        for (class, step, v) in entries.into_iter().rev() {
            if store.contains(class) {
                return Err(Error::Checkpoint(format!("class {class} appears twice")));
            }
            let slot = store.free.pop().expect("count <= capacity");
            store.write_slot(slot, &v);
            let seq = store.stamp();
            store.order.insert(seq, class);
            store.index.insert(
                class,
                Entry {
                    slot,
                    seq,
                    last_refresh_step: step,
                },
            );
        }
        Ok(store)
    }

    #[cfg(test)]
    fn check_consistency(&self) {
        assert!(self.len() <= self.capacity);
        assert_eq!(self.order.len(), self.index.len());
        for (seq, class) in &self.order {
            assert_eq!(self.index[class].seq, *seq);
        }
        assert_eq!(self.free.len() + self.len(), self.capacity);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsert {
    Refreshed,
    Enqueued { evicted: Option<ClassId> },
}
