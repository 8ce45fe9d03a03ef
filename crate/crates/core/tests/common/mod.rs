//! Oracles shared by the integration tests. Nothing here calls the code
//! under test to compute an expected value.

#![allow(dead_code)]

use protomem::encoder::LinearEncoder;
use protomem::losses::MarginLoss;
use protomem::memory::{PrototypeStore, Upsert};
use protomem::mining::{DoppelgangerEvent, DoppelgangerTable, HardnessTable};
use protomem::sampling::{draw_examples, hard_slots, stream_rng};
use protomem::vector::{norm, ClassId, ExampleId, UnitVector};
use protomem::weights::WeightView;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-6;

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n);
    let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / r).collect()
}

fn lse(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss written straight from its definition: normalize each raw embedding,
/// take plain dot products with unnormalized prototype rows, average.
pub fn reference_loss(
    loss: &MarginLoss,
    raws: &[Vec<f64>],
    protos: &[Vec<f64>],
    targets: &[usize],
) -> f64 {
    let mut total = 0.0;
    for (raw, &y) in raws.iter().zip(targets) {
        let r = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos: Vec<f64> = protos
            .iter()
            .map(|p| {
                p.iter()
                    .zip(raw)
                    .map(|(a, b)| a * b / r)
                    .sum::<f64>()
                    .clamp(-1.0, 1.0)
            })
            .collect();
        total += match *loss {
            MarginLoss::CosFace {
                scale: s,
                margin: m,
            } => {
                let z: Vec<f64> = cos
                    .iter()
                    .enumerate()
                    .map(|(j, c)| if j == y { s * (c - m) } else { s * c })
                    .collect();
                lse(&z) - z[y]
            }
            MarginLoss::DSoftmax {
                scale: s,
                termination: d,
            } => {
                let x = s * (d - cos[y]);
                let intra = if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                };
                let mut z = vec![0.0];
                z.extend(
                    cos.iter()
                        .enumerate()
                        .filter(|(j, _)| *j != y)
                        .map(|(_, c)| s * c),
                );
                intra + lse(&z)
            }
        };
    }
    total / raws.len() as f64
}

pub struct Instance {
    pub loss: MarginLoss,
    pub raws: Vec<Vec<f64>>,
    pub protos: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
}

impl Instance {
    pub fn random(
        rng: &mut ChaCha8Rng,
        loss: MarginLoss,
        dim: usize,
        classes: usize,
        batch: usize,
    ) -> Self {
        let raws = (0..batch)
            .map(|_| {
                let scale = rng.random_range(0.5..3.0);
                gaussian(rng, dim).into_iter().map(|v| v * scale).collect()
            })
            .collect();
        let protos = (0..classes).map(|_| unit(rng, dim)).collect();
        let targets = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        Instance {
            loss,
            raws,
            protos,
            targets,
        }
    }

    pub fn ids(&self) -> Vec<ClassId> {
        (0..self.protos.len() as u32).map(ClassId).collect()
    }

    pub fn buffer(&self) -> Vec<f64> {
        self.protos.concat()
    }

    pub fn reference(&self) -> f64 {
        reference_loss(&self.loss, &self.raws, &self.protos, &self.targets)
    }
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm over a whole gradient
/// tensor. Central differences carry about 1e-9 of absolute roundoff, so
/// single near-zero entries are not compared on their own.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Larger of the embedding and prototype gradient errors against central
/// differences of [`reference_loss`].
#[allow(clippy::needless_range_loop)]
pub fn loss_gradient_error(inst: &mut Instance) -> f64 {
    let ids = inst.ids();
    let buffer = inst.buffer();
    let view = WeightView::dense(inst.protos[0].len(), ids.clone(), &buffer).unwrap();
    let targets: Vec<Option<usize>> = inst.targets.iter().map(|&t| Some(t)).collect();
    let grad = inst.loss.backward(&inst.raws, &targets, &view).unwrap();
    assert!(
        (grad.loss - inst.reference()).abs() < 1e-10,
        "loss value {} vs {}",
        grad.loss,
        inst.reference()
    );

    let (mut analytic_e, mut numeric_e) = (Vec::new(), Vec::new());
    for i in 0..inst.raws.len() {
        let numeric: Vec<f64> = (0..inst.raws[i].len())
            .map(|c| {
                let orig = inst.raws[i][c];
                inst.raws[i][c] = orig + FD_STEP;
                let up = inst.reference();
                inst.raws[i][c] = orig - FD_STEP;
                let down = inst.reference();
                inst.raws[i][c] = orig;
                (up - down) / (2.0 * FD_STEP)
            })
            .collect();
        analytic_e.extend_from_slice(&grad.d_embeddings[i]);
        numeric_e.extend(numeric);
    }
    let (mut analytic_p, mut numeric_p) = (Vec::new(), Vec::new());
    for j in 0..inst.protos.len() {
        let numeric: Vec<f64> = (0..inst.protos[j].len())
            .map(|c| {
                let orig = inst.protos[j][c];
                inst.protos[j][c] = orig + FD_STEP;
                let up = inst.reference();
                inst.protos[j][c] = orig - FD_STEP;
                let down = inst.reference();
                inst.protos[j][c] = orig;
                (up - down) / (2.0 * FD_STEP)
            })
            .collect();
        let zero = vec![0.0; numeric.len()];
        let analytic = grad.d_prototypes.get(&ids[j]).map_or(&zero[..], |g| &g[..]);
        analytic_p.extend_from_slice(analytic);
        numeric_p.extend(numeric);
    }
    relative_error(&analytic_e, &numeric_e).max(relative_error(&analytic_p, &numeric_p))
}

/// Same check for the encoder weights, with the loss taken through the
/// linear map and the normalization.
pub fn encoder_gradient_error(
    rng: &mut ChaCha8Rng,
    loss: MarginLoss,
    dim_in: usize,
    inst: &Instance,
) -> f64 {
    let dim = inst.protos[0].len();
    let inputs: Vec<Vec<f64>> = (0..inst.raws.len())
        .map(|_| gaussian(rng, dim_in))
        .collect();
    let mut w = gaussian(rng, dim_in * dim);
    let project = |w: &[f64]| -> Vec<Vec<f64>> {
        inputs
            .iter()
            .map(|x| {
                (0..dim)
                    .map(|o| (0..dim_in).map(|i| x[i] * w[i * dim + o]).sum())
                    .collect()
            })
            .collect()
    };
    let encoder = LinearEncoder::from_weights(dim_in, dim, w.clone()).unwrap();
    let raws: Vec<Vec<f64>> = inputs.iter().map(|x| encoder.forward_raw(x)).collect();
    let buffer = inst.buffer();
    let view = WeightView::dense(dim, inst.ids(), &buffer).unwrap();
    let targets: Vec<Option<usize>> = inst.targets.iter().map(|&t| Some(t)).collect();
    let grad = loss.backward(&raws, &targets, &view).unwrap();
    let analytic = encoder.backward_raw(&inputs, &grad.d_embeddings);

    let numeric: Vec<f64> = (0..w.len())
        .map(|i| {
            let orig = w[i];
            w[i] = orig + FD_STEP;
            let up = reference_loss(&loss, &project(&w), &inst.protos, &inst.targets);
            w[i] = orig - FD_STEP;
            let down = reference_loss(&loss, &project(&w), &inst.protos, &inst.targets);
            w[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

pub fn random_loss(rng: &mut ChaCha8Rng, dsoftmax: bool) -> MarginLoss {
    if dsoftmax {
        MarginLoss::DSoftmax {
            scale: rng.random_range(1.0..32.0),
            termination: rng.random_range(0.0..0.9),
        }
    } else {
        MarginLoss::CosFace {
            scale: rng.random_range(1.0..32.0),
            margin: rng.random_range(0.0..0.5),
        }
    }
}

/// Worst gradient error over `instances` random problems of one loss family.
pub fn gradient_sweep(seed: u64, dsoftmax: bool, instances: usize) -> (f64, f64) {
    let mut rng = protomem::sampling::stream_rng(seed, 0);
    let mut worst_loss: f64 = 0.0;
    let mut worst_encoder: f64 = 0.0;
    for _ in 0..instances {
        let loss = random_loss(&mut rng, dsoftmax);
        let mut inst = Instance::random(&mut rng, loss, 8, 32, 16);
        worst_loss = worst_loss.max(loss_gradient_error(&mut inst));
        worst_encoder = worst_encoder.max(encoder_gradient_error(&mut rng, loss, 6, &inst));
    }
    (worst_loss, worst_encoder)
}

/// Exact probability of each `k`-subset (as a sorted index list) under
/// "`hard` draws proportional to weight without replacement, then uniform
/// draws without replacement", by enumerating ordered draw sequences.
pub fn exact_subset_distribution(weights: &[f64], k: usize, hard: usize) -> Vec<(Vec<usize>, f64)> {
    fn walk(
        weights: &[f64],
        k: usize,
        hard: usize,
        taken: &mut Vec<usize>,
        p: f64,
        out: &mut std::collections::BTreeMap<Vec<usize>, f64>,
    ) {
        if taken.len() == k {
            let mut key = taken.clone();
            key.sort();
            *out.entry(key).or_insert(0.0) += p;
            return;
        }
        let left: Vec<usize> = (0..weights.len()).filter(|i| !taken.contains(i)).collect();
        let total: f64 = left.iter().map(|&i| weights[i]).sum();
        for &i in &left {
            let q = if taken.len() < hard && total > 0.0 {
                weights[i] / total
            } else {
                1.0 / left.len() as f64
            };
            if q == 0.0 {
                continue;
            }
            taken.push(i);
            walk(weights, k, hard, taken, p * q, out);
            taken.pop();
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(weights, k, hard, &mut Vec::new(), 1.0, &mut out);
    out.into_iter().collect()
}

/// Pearson chi-square goodness of fit; returns the p-value.
pub fn chi_square_p(observed: &[u64], expected_probs: &[f64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n: u64 = observed.iter().sum();
    let stat: f64 = observed
        .iter()
        .zip(expected_probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let df = (observed.len() - 1) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

/// Doppelganger sets kept as sorted vectors and updated by the literal rule.
pub struct ShadowDoppelgangers {
    pub sets: Vec<Vec<u32>>,
}

impl ShadowDoppelgangers {
    pub fn new(n: usize) -> Self {
        ShadowDoppelgangers {
            sets: vec![Vec::new(); n],
        }
    }

    pub fn apply(&mut self, target: u32, top: u32, sampled: &[u32]) {
        let set = &mut self.sets[target as usize];
        let mut next: Vec<u32> = set
            .iter()
            .copied()
            .filter(|c| !(sampled.contains(c) && *c != top))
            .collect();
        if !next.contains(&top) {
            next.push(top);
        }
        next.sort();
        *set = next;
    }
}

pub fn unit_vec(v: Vec<f64>) -> UnitVector {
    protomem::normalize(&v).unwrap()
}

pub const HARDNESS_DRAWS: usize = 100_000;

pub const WEIGHTS: [f64; 6] = [2.0, 1.5, 0.2, 0.8, 1.0, 0.5];

pub fn hardness_table() -> HardnessTable {
    let mut t = HardnessTable::new(WEIGHTS.len());
    for (i, &w) in WEIGHTS.iter().enumerate().skip(1) {
        t.set(ExampleId(i as u32), 1.0 - w);
    }
    t
}

/// p-value of the empirical subset distribution of `draw_examples` against
/// the enumerated one.
pub fn hardness_fit(h: f64, seed: u64) -> f64 {
    let k = 3;
    let table = hardness_table();
    for (i, &w) in WEIGHTS.iter().enumerate() {
        assert!((table.get(ExampleId(i as u32)) - w).abs() < 1e-15);
    }
    let exact = exact_subset_distribution(&WEIGHTS, k, hard_slots(h, k));
    let members: Vec<ExampleId> = (0..WEIGHTS.len() as u32).map(ExampleId).collect();
    let mut counts = vec![0u64; exact.len()];
    let mut rng = stream_rng(seed, 0);
    for _ in 0..HARDNESS_DRAWS {
        let mut drawn: Vec<usize> = draw_examples(&members, k, h, Some(&table), &mut rng)
            .iter()
            .map(|e| e.index())
            .collect();
        drawn.sort();
        let slot = exact
            .iter()
            .position(|(s, _)| *s == drawn)
            .expect("drawn subset has nonzero probability");
        counts[slot] += 1;
    }
    let probs: Vec<f64> = exact.iter().map(|(_, p)| *p).collect();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    chi_square_p(&counts, &probs)
}

/// Runs `events` random updates through the table and the shadow model and
/// returns the number of events after which they disagreed.
pub fn doppelganger_mismatches(events: usize, classes: u32, seed: u64) -> usize {
    let mut rng = stream_rng(seed, 0);
    let mut table = DoppelgangerTable::new(classes as usize);
    let mut shadow = ShadowDoppelgangers::new(classes as usize);
    let mut mismatches = 0;
    for _ in 0..events {
        let target = rng.random_range(0..classes);
        let size = rng.random_range(2..=classes as usize);
        let mut sampled: Vec<u32> = rand::seq::index::sample(&mut rng, classes as usize, size)
            .iter()
            .map(|c| c as u32)
            .collect();
        if !sampled.contains(&target) && rng.random_bool(0.8) {
            sampled.push(target);
        }
        let candidates: Vec<u32> = sampled.iter().copied().filter(|&c| c != target).collect();
        let top = candidates[rng.random_range(0..candidates.len())];
        let ids: Vec<ClassId> = sampled.iter().map(|&c| ClassId(c)).collect();
        table.update_doppelgangers(&[DoppelgangerEvent {
            target: ClassId(target),
            top_nontarget: ClassId(top),
            sampled: &ids,
        }]);
        shadow.apply(target, top, &sampled);
        let got: Vec<u32> = table.set(ClassId(target)).iter().map(|c| c.0).collect();
        if got != shadow.sets[target as usize] || got.contains(&target) {
            mismatches += 1;
        }
    }
    for c in 0..classes {
        let got: Vec<u32> = table.set(ClassId(c)).iter().map(|c| c.0).collect();
        if got != shadow.sets[c as usize] {
            mismatches += 1;
        }
    }
    mismatches
}

/// Flat list of (class, last refresh step, prototype) with a linear scan for
/// the oldest entry.
pub struct ShadowStore {
    pub capacity: usize,
    pub entries: Vec<(ClassId, u64, Vec<f64>)>,
}

fn renormalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl ShadowStore {
    pub fn upsert(&mut self, class: ClassId, p: &[f64], r: f64, step: u64) -> Option<ClassId> {
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == class) {
            e.2 = renormalized(
                e.2.iter()
                    .zip(p)
                    .map(|(o, n)| r * n + (1.0 - r) * o)
                    .collect(),
            );
            e.1 = step;
            return None;
        }
        let mut evicted = None;
        if self.entries.len() == self.capacity {
            let oldest = (0..self.entries.len())
                .min_by_key(|&i| self.entries[i].1)
                .unwrap();
            evicted = Some(self.entries.remove(oldest).0);
        }
        self.entries.push((class, step, p.to_vec()));
        evicted
    }
}

/// Drives a store and the shadow through `ops` random upserts and gradient
/// steps. Returns the first disagreement.
pub fn store_shadow_run(capacity: usize, ops: usize, seed: u64) -> Result<(), String> {
    let dim = 4;
    let mut rng = stream_rng(seed, 0);
    let mut store = PrototypeStore::new(dim, capacity);
    let mut shadow = ShadowStore {
        capacity,
        entries: Vec::new(),
    };
    let classes = (capacity as u32 * 3).max(4);
    for step in 0..ops as u64 {
        if rng.random_bool(0.3) && !shadow.entries.is_empty() {
            let target = shadow.entries[rng.random_range(0..shadow.entries.len())].0;
            let g: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            store
                .apply_gradients([(target, g.clone())], 0.1)
                .map_err(|e| e.to_string())?;
            let e = shadow.entries.iter_mut().find(|e| e.0 == target).unwrap();
            e.2 = renormalized(e.2.iter().zip(&g).map(|(p, g)| p - 0.1 * g).collect());
        } else {
            let class = ClassId(rng.random_range(0..classes));
            let p = unit_vec((0..dim).map(|_| rng.random::<f64>() - 0.5).collect());
            let expected = shadow.upsert(class, p.as_slice(), 0.2, step);
            let got = match store
                .upsert(class, &p, 0.2, step)
                .map_err(|e| e.to_string())?
            {
                Upsert::Refreshed => None,
                Upsert::Enqueued { evicted } => evicted,
            };
            if got != expected {
                return Err(format!(
                    "M={capacity} step {step}: evicted {got:?}, oracle {expected:?}"
                ));
            }
        }
        if store.len() > capacity || store.len() != shadow.entries.len() {
            return Err(format!("M={capacity} step {step}: size {}", store.len()));
        }
        for (c, s, v) in &shadow.entries {
            let stored = store
                .get(*c)
                .ok_or_else(|| format!("M={capacity} step {step}: {c:?} missing"))?;
            if (norm(stored) - 1.0).abs() >= 1e-6 {
                return Err(format!("M={capacity} step {step}: norm {}", norm(stored)));
            }
            if store.last_refresh_step(*c) != Some(*s)
                || stored.iter().zip(v).any(|(a, b)| (a - b).abs() > 1e-9)
            {
                return Err(format!("M={capacity} step {step}: {c:?} diverged"));
            }
        }
    }
    Ok(())
}
