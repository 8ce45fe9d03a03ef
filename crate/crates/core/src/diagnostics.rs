//! Measurement instruments: prototype obsolescence, classifier memory
//! residency and per-step operation costs.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{dsoftmaxk_sample, pprn_sample, FullWeightMatrix};
use crate::dataset::SyntheticDataset;
use crate::encoder::LinearEncoder;
use crate::error::{Error, Result};
pub use crate::head::MemoryReport;
use crate::head::SystemKind;
use crate::memory::{generate_prototype, PrototypeStore};
use crate::sampling::stream_rng;
use crate::vector::{dot, normalize, ClassId, UnitVector};
use crate::weights::WeightView;

/// Normalized mean embedding of every example of `class`.
pub fn class_center(
    encoder: &LinearEncoder,
    dataset: &SyntheticDataset,
    class: ClassId,
) -> Result<UnitVector> {
    let members = dataset.index().members(class);
    let embeddings = members
        .iter()
        .map(|&e| encoder.forward(dataset.example(e)))
        .collect::<Result<Vec<_>>>()?;
    generate_prototype(&embeddings)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b)
}

/// How many longest-unsampled classes the metric averages over.
pub fn default_n_longest(num_classes: usize) -> usize {
    (num_classes / 20).clamp(1, 100)
}

/// Last step at which each class's weights were updated from data.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleClock {
    last: Vec<Option<u64>>,
}

impl SampleClock {
    pub fn new(num_classes: usize) -> Self {
        SampleClock {
            last: vec![None; num_classes],
        }
    }

    pub fn mark(&mut self, classes: &[ClassId], step: u64) {
        for c in classes {
            self.last[c.index()] = Some(step);
        }
    }

    pub fn last(&self, class: ClassId) -> Option<u64> {
        self.last[class.index()]
    }

    /// Classes ordered from longest unsampled; never-sampled classes first
    /// when `include_never` is set, otherwise left out. Ties go to lower ids.
    pub fn longest_unsampled(&self, n: usize, include_never: bool) -> Vec<ClassId> {
        let mut classes: Vec<(Option<u64>, ClassId)> = self
            .last
            .iter()
            .enumerate()
            .filter(|(_, s)| include_never || s.is_some())
            .map(|(c, s)| (*s, ClassId(c as u32)))
            .collect();
        classes.sort();
        classes.into_iter().take(n).map(|(_, c)| c).collect()
    }
}

/// Mean `1 - cos(prototype, center)` over `classes`; `None` when empty.
pub fn obsolescence_metric<P, C>(
    classes: &[ClassId],
    mut prototype_of: P,
    mut center_of: C,
) -> Result<Option<f64>>
where
    P: FnMut(ClassId) -> Result<UnitVector>,
    C: FnMut(ClassId) -> Result<UnitVector>,
{
    if classes.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for &c in classes {
        total += cosine_distance(&prototype_of(c)?, &center_of(c)?);
    }
    Ok(Some(total / classes.len() as f64))
}

/// Prototype memory's probe: a fresh prototype from `k` random examples of
/// the class under the current encoder.
pub fn generated_probe<R: Rng + ?Sized>(
    encoder: &LinearEncoder,
    dataset: &SyntheticDataset,
    class: ClassId,
    k: usize,
    rng: &mut R,
) -> Result<UnitVector> {
    let members = dataset.index().members(class);
    let picks = rand::seq::index::sample(rng, members.len(), k.min(members.len()));
    let embeddings = picks
        .iter()
        .map(|i| encoder.forward(dataset.example(members[i])))
        .collect::<Result<Vec<_>>>()?;
    generate_prototype(&embeddings)
}

/// Symbolic residency of each system's classifier state.
pub fn memory_formula(
    system: SystemKind,
    num_classes: usize,
    sampled: usize,
    dim: usize,
) -> MemoryReport {
    match system {
        SystemKind::Pm => MemoryReport {
            device_resident_reals: sampled * dim,
            persistent_reals: 0,
        },
        SystemKind::Pprn | SystemKind::DSoftmaxK => MemoryReport {
            device_resident_reals: sampled * dim,
            persistent_reals: num_classes * dim,
        },
        SystemKind::Full => MemoryReport {
            device_resident_reals: num_classes * dim,
            persistent_reals: 0,
        },
    }
}

/// Similarities of every embedding against every row, `embeddings x rows`
/// row-major. Loops rows outermost so each weight row is read once.
pub fn similarity_matrix(view: &WeightView<'_>, embeddings: &[UnitVector]) -> Vec<f64> {
    let n = embeddings.len();
    let mut out = vec![0.0; n * view.len()];
    for j in 0..view.len() {
        let row = view.row(j);
        for (i, e) in embeddings.iter().enumerate() {
            out[i * view.len() + j] = dot(row, e);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub num_classes: usize,
    /// Memory sizes / sampled class counts to measure.
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub batch_size: usize,
    pub k: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "all_systems")]
    pub systems: Vec<SystemKind>,
}

fn all_systems() -> Vec<SystemKind> {
    SystemKind::ALL.to_vec()
}

fn default_steps() -> usize {
    100
}

fn default_warmup() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub system: SystemKind,
    pub num_classes: usize,
    pub sampled: usize,
    pub dim: usize,
    pub batch_size: usize,
    pub similarity_ms: f64,
    pub generation_ms: Option<f64>,
    pub transfer_ms: Option<f64>,
    pub transfer_bytes_per_step: u64,
}

pub const BENCH_HEADER: &str =
    "system,num_classes,sampled,dim,batch_size,similarity_ms,generation_ms,transfer_ms,transfer_bytes_per_step";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.6},{},{},{}",
            self.system,
            self.num_classes,
            self.sampled,
            self.dim,
            self.batch_size,
            self.similarity_ms,
            opt(self.generation_ms),
            opt(self.transfer_ms),
            self.transfer_bytes_per_step
        )
    }
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> UnitVector {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

/// A synthetic step's batch: `batch_size / k` random classes with `k`
/// random unit embeddings each.
fn random_batch<R: Rng + ?Sized>(
    cfg: &BenchConfig,
    rng: &mut R,
) -> Vec<(ClassId, Vec<UnitVector>)> {
    let groups = (cfg.batch_size / cfg.k).max(1);
    rand::seq::index::sample(rng, cfg.num_classes, groups.min(cfg.num_classes))
        .iter()
        .map(|c| {
            (
                ClassId(c as u32),
                (0..cfg.k).map(|_| random_unit(cfg.dim, rng)).collect(),
            )
        })
        .collect()
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Mean per-step time of each system's main operations. Prototype memory is
/// filled to capacity before measurement starts; warmup steps are dropped.
pub fn bench_step_costs(system: SystemKind, cfg: &BenchConfig, size: usize) -> Result<BenchRow> {
    if cfg.steps == 0 || cfg.k == 0 || cfg.dim == 0 || cfg.batch_size < cfg.k {
        return Err(Error::Config(
            "bench needs positive steps, k and dim, and a batch of at least k".into(),
        ));
    }
    let sampled = if system == SystemKind::Full {
        cfg.num_classes
    } else {
        size
    };
    if sampled > cfg.num_classes {
        return Err(Error::InsufficientClasses {
            requested: sampled,
            available: cfg.num_classes,
        });
    }
    let mut rng = stream_rng(cfg.seed, 900);
    let (mut sim, mut gen, mut xfer) = (0.0, 0.0, 0.0);
    let mut bytes_per_step = 0;

    match system {
        SystemKind::Pm => {
            let mut store = PrototypeStore::new(cfg.dim, sampled);
            // Fill before measuring.
            for c in rand::seq::index::sample(&mut rng, cfg.num_classes, sampled).iter() {
                store.enqueue(ClassId(c as u32), &random_unit(cfg.dim, &mut rng), 0)?;
            }
            for step in 0..cfg.warmup + cfg.steps {
                let batch = random_batch(cfg, &mut rng);
                let t = Instant::now();
                for (class, embs) in &batch {
                    let p = generate_prototype(embs)?;
                    store.upsert(*class, &p, 0.2, step as u64)?;
                }
                let g = ms(t);
                let embs: Vec<UnitVector> = batch.into_iter().flat_map(|(_, e)| e).collect();
                let view = store.view();
                let t = Instant::now();
                std::hint::black_box(similarity_matrix(&view, &embs));
                let s = ms(t);
                if step >= cfg.warmup {
                    gen += g;
                    sim += s;
                }
            }
        }
        SystemKind::Pprn | SystemKind::DSoftmaxK => {
            let matrix = FullWeightMatrix::random(cfg.num_classes, cfg.dim, &mut rng);
            let mut active = Vec::with_capacity(sampled * cfg.dim);
            for step in 0..cfg.warmup + cfg.steps {
                let batch = random_batch(cfg, &mut rng);
                let positives: Vec<ClassId> = batch.iter().map(|(c, _)| *c).collect();
                let ids = if system == SystemKind::Pprn {
                    pprn_sample(cfg.num_classes, &positives, sampled, &mut rng)?
                } else {
                    dsoftmaxk_sample(cfg.num_classes, &positives, sampled, &mut rng)?
                };
                let t = Instant::now();
                bytes_per_step = matrix.gather(&ids, &mut active);
                let x = ms(t);
                let embs: Vec<UnitVector> = batch.into_iter().flat_map(|(_, e)| e).collect();
                let view = WeightView::dense(cfg.dim, ids, &active)?;
                let t = Instant::now();
                std::hint::black_box(similarity_matrix(&view, &embs));
                let s = ms(t);
                if step >= cfg.warmup {
                    xfer += x;
                    sim += s;
                }
            }
        }
        SystemKind::Full => {
            let matrix = FullWeightMatrix::random(cfg.num_classes, cfg.dim, &mut rng);
            let view = matrix.dense_view();
            for step in 0..cfg.warmup + cfg.steps {
                let embs: Vec<UnitVector> = random_batch(cfg, &mut rng)
                    .into_iter()
                    .flat_map(|(_, e)| e)
                    .collect();
                let t = Instant::now();
                std::hint::black_box(similarity_matrix(&view, &embs));
                if step >= cfg.warmup {
                    sim += ms(t);
                }
            }
        }
    }

    let n = cfg.steps as f64;
    Ok(BenchRow {
        system,
        num_classes: cfg.num_classes,
        sampled,
        dim: cfg.dim,
        batch_size: cfg.batch_size,
        similarity_ms: sim / n,
        generation_ms: (system == SystemKind::Pm).then_some(gen / n),
        transfer_ms: matches!(system, SystemKind::Pprn | SystemKind::DSoftmaxK).then_some(xfer / n),
        transfer_bytes_per_step: bytes_per_step,
    })
}

/// Rows for every configured system and size; full softmax once.
pub fn bench_all(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &system in &cfg.systems {
        if system == SystemKind::Full {
            rows.push(bench_step_costs(system, cfg, cfg.num_classes)?);
            continue;
        }
        for &size in &cfg.sizes {
            rows.push(bench_step_costs(system, cfg, size)?);
        }
    }
    Ok(rows)
}

pub const MEMORY_HEADER: &str = "system,num_classes,sampled,dim,device_resident_reals,persistent_reals,instrumented_device_reals,instrumented_persistent_reals";

pub fn memory_csv_line(
    system: SystemKind,
    num_classes: usize,
    sampled: usize,
    dim: usize,
    formula: MemoryReport,
    measured: MemoryReport,
) -> String {
    format!(
        "{system},{num_classes},{sampled},{dim},{},{},{},{}",
        formula.device_resident_reals,
        formula.persistent_reals,
        measured.device_resident_reals,
        measured.persistent_reals
    )
}
