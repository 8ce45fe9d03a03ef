//! Hard class and hard example bookkeeping.
//!
//! [`DoppelgangerTable`] keeps, per class, the set of classes that have
//! recently out-scored every other non-target class for one of its examples.
//! A member is dropped when it shows up among the classifier weights for a
//! later example of the class but is not the top scorer.
//!
//! [`HardnessTable`] keeps `1 - cos(embedding, own prototype)` per example,
//! starting every example at the maximum value 2.0 so unseen examples are
//! preferred by hardness-proportional sampling.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::losses::LogitsRow;
use crate::vector::{ClassId, ExampleId};

pub const INITIAL_HARDNESS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DoppelgangerTable {
    sets: Vec<BTreeSet<ClassId>>,
}

/// One classified example: its class, the non-target class that scored
/// highest, and a predicate for membership in the current classifier.
#[derive(Clone, Debug)]
pub struct DoppelgangerEvent<'a> {
    pub target: ClassId,
    pub top_nontarget: ClassId,
    pub sampled: &'a [ClassId],
}

impl DoppelgangerTable {
    pub fn new(num_classes: usize) -> Self {
        DoppelgangerTable {
            sets: vec![BTreeSet::new(); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.sets.len()
    }

    pub fn set(&self, class: ClassId) -> &BTreeSet<ClassId> {
        &self.sets[class.index()]
    }

    /// Applies one classification outcome. `in_classifier` tells whether a
    /// class had a prototype among this step's weights.
    pub fn update(
        &mut self,
        target: ClassId,
        top_nontarget: ClassId,
        in_classifier: impl Fn(ClassId) -> bool,
    ) {
        if target == top_nontarget {
            debug_assert!(false, "a class cannot be its own doppelganger");
            return;
        }
        let set = &mut self.sets[target.index()];
        set.retain(|&c| c == top_nontarget || !in_classifier(c));
        set.insert(top_nontarget);
    }

    pub fn update_doppelgangers(&mut self, events: &[DoppelgangerEvent<'_>]) {
        for e in events {
            self.update(e.target, e.top_nontarget, |c| e.sampled.contains(&c));
        }
    }

    /// Uniform draw from the class's doppelganger set.
    pub fn sample<R: Rng + ?Sized>(&self, class: ClassId, rng: &mut R) -> Option<ClassId> {
        let set = &self.sets[class.index()];
        if set.is_empty() {
            return None;
        }
        set.iter().nth(rng.random_range(0..set.len())).copied()
    }

    /// `u64 num_classes`, then per class `u64 len` followed by the member ids.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_u64(w, self.sets.len() as u64)?;
        for set in &self.sets {
            io::write_u64(w, set.len() as u64)?;
            for c in set {
                io::write_u64(w, u64::from(c.0))?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = io::read_len(r, "num_classes", u64::from(u32::MAX))?;
        let mut sets = Vec::with_capacity(n);
        for owner in 0..n {
            let len = io::read_len(r, "set size", n as u64)?;
            let mut set = BTreeSet::new();
            for _ in 0..len {
                let c = io::read_u64(r)?;
                if c as usize >= n || c as usize == owner {
                    return Err(Error::Checkpoint(format!(
                        "bad doppelganger {c} for class {owner}"
                    )));
                }
                set.insert(ClassId(c as u32));
            }
            sets.push(set);
        }
        Ok(DoppelgangerTable { sets })
    }
}

/// Highest-scoring non-target class of a row, ties going to the lowest id.
pub fn top_nontarget(row: &LogitsRow, ids: &[ClassId]) -> Option<ClassId> {
    let target = row.target?;
    let mut best: Option<(f64, ClassId)> = None;
    for (j, (&c, &id)) in row.cosines.iter().zip(ids).enumerate() {
        if j == target {
            continue;
        }
        best = match best {
            Some((bc, bid)) if bc > c || (bc == c && bid < id) => Some((bc, bid)),
            _ => Some((c, id)),
        };
    }
    best.map(|(_, id)| id)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardnessTable {
    values: Vec<f64>,
}

impl HardnessTable {
    pub fn new(num_examples: usize) -> Self {
        HardnessTable {
            values: vec![INITIAL_HARDNESS; num_examples],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, example: ExampleId) -> f64 {
        self.values[example.index()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn set(&mut self, example: ExampleId, cos_target: f64) {
        self.values[example.index()] = 1.0 - cos_target.clamp(-1.0, 1.0);
    }

    pub fn update_hardness(&mut self, scored: &[(ExampleId, f64)]) {
        for &(e, c) in scored {
            self.set(e, c);
        }
    }

    /// `u64 len` followed by `len` f64 values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_u64(w, self.values.len() as u64)?;
        io::write_f64s(w, &self.values)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = io::read_len(r, "num_examples", u64::from(u32::MAX))?;
        let values = io::read_f64s(r, n)?;
        if let Some(v) = values.iter().find(|v| !(0.0..=2.0).contains(*v)) {
            return Err(Error::Checkpoint(format!("hardness {v} outside [0, 2]")));
        }
        Ok(HardnessTable { values })
    }
}
