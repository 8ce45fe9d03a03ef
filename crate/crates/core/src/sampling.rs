//! Group-based mini-batch sampling.
//!
//! Every batch is a list of single-class groups of exactly `k` examples, so
//! each class in the batch has enough embeddings to generate a prototype.
//! Two strategies fill groups:
//!
//! * iterate-and-shuffle partitions the dataset into groups, shuffles them and
//!   walks through the pool, regrouping once it is exhausted, so every
//!   example is seen about equally often;
//! * classes-then-images first picks classes (uniformly or through the
//!   doppelganger table) and then `k` examples of each, a `ceil(h * k)` share
//!   of them drawn in proportion to their hardness, so every class is seen
//!   about equally often.
//!
//! A [`BatchSampler`] concatenates any number of such parts into one
//! composite batch.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::{DoppelgangerTable, HardnessTable};
use crate::vector::{ClassId, ExampleId};

/// Deterministic RNG for an independent stream derived from one seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Class membership of a dataset with dense ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelIndex {
    by_class: Vec<Vec<ExampleId>>,
    labels: Vec<ClassId>,
}

impl LabelIndex {
    pub fn from_labels(labels: Vec<ClassId>) -> Self {
        let num_classes = labels.iter().map(|c| c.index() + 1).max().unwrap_or(0);
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, c) in labels.iter().enumerate() {
            by_class[c.index()].push(ExampleId(i as u32));
        }
        LabelIndex { by_class, labels }
    }

    /// Examples numbered consecutively, class by class.
    pub fn from_counts(counts: &[usize]) -> Self {
        let labels = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(ClassId(c as u32), n))
            .collect();
        Self::from_labels(labels)
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn num_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn members(&self, class: ClassId) -> &[ExampleId] {
        &self.by_class[class.index()]
    }

    pub fn label(&self, example: ExampleId) -> ClassId {
        self.labels[example.index()]
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub class: ClassId,
    pub examples: Vec<ExampleId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupedBatch {
    pub groups: Vec<Group>,
}

impl GroupedBatch {
    /// Number of examples.
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.examples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn examples(&self) -> impl Iterator<Item = (ClassId, ExampleId)> + '_ {
        self.groups
            .iter()
            .flat_map(|g| g.examples.iter().map(move |&e| (g.class, e)))
    }

    /// Groups of the same class merged, in order of first appearance. Each
    /// entry lists positions into [`GroupedBatch::examples`] order.
    pub fn merged_classes(&self) -> Vec<(ClassId, Vec<usize>)> {
        let mut slot: HashMap<ClassId, usize> = HashMap::new();
        let mut merged: Vec<(ClassId, Vec<usize>)> = Vec::new();
        let mut pos = 0;
        for g in &self.groups {
            let i = *slot.entry(g.class).or_insert_with(|| {
                merged.push((g.class, Vec::new()));
                merged.len() - 1
            });
            merged[i].1.extend(pos..pos + g.examples.len());
            pos += g.examples.len();
        }
        merged
    }

    /// Checks the group invariants against a label index.
    pub fn check(&self, index: &LabelIndex, k: usize) -> std::result::Result<(), String> {
        for g in &self.groups {
            if g.examples.len() != k {
                return Err(format!(
                    "group of class {} has {} examples",
                    g.class,
                    g.examples.len()
                ));
            }
            let mut seen = g.examples.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != k {
                return Err(format!("group of class {} repeats an example", g.class));
            }
            if let Some(e) = g.examples.iter().find(|&&e| index.label(e) != g.class) {
                return Err(format!("example {e} is not in class {}", g.class));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GroupPool {
    pub groups: Vec<Group>,
    /// Classes skipped for having fewer than `k` examples.
    pub excluded: usize,
}

/// Partitions every class with at least `k` examples into shuffled groups of
/// `k`. A trailing partial group is completed with distinct examples resampled
/// from the rest of its class.
pub fn build_group_pool<R: Rng + ?Sized>(
    index: &LabelIndex,
    k: usize,
    rng: &mut R,
) -> Result<GroupPool> {
    let mut groups = Vec::new();
    let mut excluded = 0;
    for c in 0..index.num_classes() {
        let class = ClassId(c as u32);
        let members = index.members(class);
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            excluded += 1;
            continue;
        }
        let mut order = members.to_vec();
        order.shuffle(rng);
        let full = order.len() / k * k;
        for chunk in order[..full].chunks(k) {
            groups.push(Group {
                class,
                examples: chunk.to_vec(),
            });
        }
        if full < order.len() {
            let mut examples = order[full..].to_vec();
            let need = k - examples.len();
            let fill = rand::seq::index::sample(rng, full, need);
            examples.extend(fill.iter().map(|i| order[i]));
            groups.push(Group { class, examples });
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} classes have fewer than {k} examples and were excluded");
    }
    if groups.is_empty() {
        return Err(Error::EmptyPool { k });
    }
    groups.shuffle(rng);
    Ok(GroupPool { groups, excluded })
}

/// Walks a shuffled group pool; regroups and reshuffles when it runs out.
#[derive(Clone, Debug)]
pub struct IterateShuffleSampler {
    index: Arc<LabelIndex>,
    k: usize,
    pool: GroupPool,
    cursor: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl IterateShuffleSampler {
    pub fn new(index: Arc<LabelIndex>, k: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        let pool = build_group_pool(&index, k, &mut rng)?;
        Ok(IterateShuffleSampler {
            index,
            k,
            pool,
            cursor: 0,
            epoch: 0,
            rng,
        })
    }

    /// The pool of the current epoch.
    pub fn pool(&self) -> &GroupPool {
        &self.pool
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_groups(&mut self, n: usize) -> Vec<Group> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.pool.groups.len() {
                self.pool = build_group_pool(&self.index, self.k, &mut self.rng)
                    .expect("pool was non-empty before");
                self.cursor = 0;
                self.epoch += 1;
            }
            out.push(self.pool.groups[self.cursor].clone());
            self.cursor += 1;
        }
        out
    }

    pub fn next_batch(&mut self, groups_per_batch: usize) -> GroupedBatch {
        GroupedBatch {
            groups: self.next_groups(groups_per_batch),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassSource {
    Uniform,
    /// Multi-doppelganger mining: `random` classes drawn uniformly, the rest
    /// of the batch filled with doppelgangers of classes already chosen.
    Doppelganger {
        random: usize,
    },
}

/// Tables the samplers may consult; owned by the training loop.
#[derive(Clone, Copy, Debug, Default)]
pub struct SamplingContext<'a> {
    pub hardness: Option<&'a HardnessTable>,
    pub doppelgangers: Option<&'a DoppelgangerTable>,
}

#[derive(Clone, Debug)]
pub struct ClassesThenImagesSampler {
    index: Arc<LabelIndex>,
    k: usize,
    hardness_ratio: f64,
    source: ClassSource,
    eligible: Vec<ClassId>,
    is_eligible: Vec<bool>,
    rng: ChaCha8Rng,
}

impl ClassesThenImagesSampler {
    pub fn new(
        index: Arc<LabelIndex>,
        k: usize,
        hardness_ratio: f64,
        source: ClassSource,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        crate::config::check_unit_interval("h", hardness_ratio)?;
        let is_eligible: Vec<bool> = (0..index.num_classes())
            .map(|c| index.members(ClassId(c as u32)).len() >= k)
            .collect();
        let eligible: Vec<ClassId> = is_eligible
            .iter()
            .enumerate()
            .filter(|(_, &e)| e)
            .map(|(c, _)| ClassId(c as u32))
            .collect();
        if eligible.is_empty() {
            return Err(Error::EmptyPool { k });
        }
        Ok(ClassesThenImagesSampler {
            index,
            k,
            hardness_ratio,
            source,
            eligible,
            is_eligible,
            rng,
        })
    }

    pub fn next_groups(&mut self, n: usize, ctx: &SamplingContext<'_>) -> Vec<Group> {
        let classes = self.choose_classes(n, ctx.doppelgangers);
        classes
            .into_iter()
            .map(|class| {
                let examples = draw_examples(
                    self.index.members(class),
                    self.k,
                    self.hardness_ratio,
                    ctx.hardness,
                    &mut self.rng,
                );
                Group { class, examples }
            })
            .collect()
    }

    pub fn next_batch(
        &mut self,
        groups_per_batch: usize,
        ctx: &SamplingContext<'_>,
    ) -> GroupedBatch {
        GroupedBatch {
            groups: self.next_groups(groups_per_batch, ctx),
        }
    }

    fn uniform_classes(&mut self, n: usize) -> Vec<ClassId> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let take = (n - out.len()).min(self.eligible.len());
            let picks = rand::seq::index::sample(&mut self.rng, self.eligible.len(), take);
            out.extend(picks.iter().map(|i| self.eligible[i]));
        }
        out
    }

    fn choose_classes(&mut self, n: usize, table: Option<&DoppelgangerTable>) -> Vec<ClassId> {
        let (random, table) = match (self.source, table) {
            (ClassSource::Doppelganger { random }, Some(t)) => (random.clamp(1, n.max(1)), t),
            _ => return self.uniform_classes(n),
        };
        let mut chosen = self.uniform_classes(random.min(n));
        let mut taken: std::collections::HashSet<ClassId> = chosen.iter().copied().collect();
        let mut seed_at = 0;
        while chosen.len() < n {
            let seed = chosen[seed_at % chosen.len()];
            seed_at += 1;
            let pick = table.sample(seed, &mut self.rng).filter(|c| {
                self.is_eligible.get(c.index()).copied().unwrap_or(false) && !taken.contains(c)
            });
            let class = match pick {
                Some(c) => c,
                None => {
                    let free: Vec<ClassId> = if taken.len() < self.eligible.len() {
                        self.eligible
                            .iter()
                            .copied()
                            .filter(|c| !taken.contains(c))
                            .collect()
                    } else {
                        self.eligible.clone()
                    };
                    free[self.rng.random_range(0..free.len())]
                }
            };
            taken.insert(class);
            chosen.push(class);
        }
        chosen
    }
}

/// Number of hardness-drawn slots in a group of `k` for ratio `h`.
pub fn hard_slots(h: f64, k: usize) -> usize {
    // The small offset keeps products such as 0.3 * 10 from rounding up.
    ((h * k as f64 - 1e-9).ceil().max(0.0) as usize).min(k)
}

/// Draws `k` distinct examples: `ceil(h * k)` with probability proportional
/// to hardness (successively, without replacement), the rest uniformly from
/// what remains. Without a table every draw is uniform.
pub fn draw_examples<R: Rng + ?Sized>(
    members: &[ExampleId],
    k: usize,
    h: f64,
    hardness: Option<&HardnessTable>,
    rng: &mut R,
) -> Vec<ExampleId> {
    assert!(members.len() >= k, "class has fewer than k examples");
    let mut remaining = members.to_vec();
    let mut out = Vec::with_capacity(k);
    if let Some(table) = hardness {
        for _ in 0..hard_slots(h, k) {
            let total: f64 = remaining.iter().map(|&e| table.get(e)).sum();
            let i = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = remaining.len() - 1;
                for (i, &e) in remaining.iter().enumerate() {
                    let w = table.get(e);
                    if u < w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                // Never land on a zero-weight tail element through rounding.
                while table.get(remaining[pick]) == 0.0 {
                    pick -= 1;
                }
                pick
            } else {
                rng.random_range(0..remaining.len())
            };
            out.push(remaining.swap_remove(i));
        }
    }
    while out.len() < k {
        let i = rng.random_range(0..remaining.len());
        out.push(remaining.swap_remove(i));
    }
    out
}

/// One part of a batch plan, as written in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartConfig {
    IterateShuffle {
        groups: usize,
    },
    ClassesThenImages {
        groups: usize,
        /// Enables doppelganger class selection with this many random classes.
        #[serde(default)]
        doppelganger_random: Option<usize>,
    },
}

impl PartConfig {
    pub fn groups(&self) -> usize {
        match *self {
            PartConfig::IterateShuffle { groups }
            | PartConfig::ClassesThenImages { groups, .. } => groups,
        }
    }
}

#[derive(Clone, Debug)]
pub enum GroupSource {
    IterateShuffle(IterateShuffleSampler),
    ClassesThenImages(ClassesThenImagesSampler),
}

/// Composite batch: each part contributes its own number of groups.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    parts: Vec<(GroupSource, usize)>,
}

impl BatchSampler {
    pub fn new(parts: Vec<(GroupSource, usize)>) -> Self {
        BatchSampler { parts }
    }

    pub fn from_plan(
        index: Arc<LabelIndex>,
        k: usize,
        h: f64,
        plan: &[PartConfig],
        seed: u64,
    ) -> Result<Self> {
        if plan.is_empty() {
            return Err(Error::Config("sampling plan has no parts".into()));
        }
        let parts = plan
            .iter()
            .enumerate()
            .map(|(i, part)| {
                let rng = stream_rng(seed, 100 + i as u64);
                let src = match *part {
                    PartConfig::IterateShuffle { .. } => GroupSource::IterateShuffle(
                        IterateShuffleSampler::new(index.clone(), k, rng)?,
                    ),
                    PartConfig::ClassesThenImages {
                        doppelganger_random,
                        ..
                    } => {
                        let source = match doppelganger_random {
                            Some(random) => ClassSource::Doppelganger { random },
                            None => ClassSource::Uniform,
                        };
                        GroupSource::ClassesThenImages(ClassesThenImagesSampler::new(
                            index.clone(),
                            k,
                            h,
                            source,
                            rng,
                        )?)
                    }
                };
                Ok((src, part.groups()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchSampler { parts })
    }

    pub fn groups_per_batch(&self) -> usize {
        self.parts.iter().map(|(_, n)| n).sum()
    }

    pub fn next_batch(&mut self, ctx: &SamplingContext<'_>) -> GroupedBatch {
        let mut groups = Vec::with_capacity(self.groups_per_batch());
        for (src, n) in &mut self.parts {
            match src {
                GroupSource::IterateShuffle(s) => groups.extend(s.next_groups(*n)),
                GroupSource::ClassesThenImages(s) => groups.extend(s.next_groups(*n, ctx)),
            }
        }
        GroupedBatch { groups }
    }
}
