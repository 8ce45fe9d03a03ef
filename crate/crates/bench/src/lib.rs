//! Fixtures for the kernel benchmarks.

use protomem::baselines::FullWeightMatrix;
use protomem::memory::PrototypeStore;
use protomem::sampling::stream_rng;
use protomem::{normalize, ClassId, UnitVector};
use rand::Rng;

pub fn random_units<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<UnitVector> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            if let Ok(u) = normalize(&v) {
                break u;
            }
        })
        .collect()
}

/// A store of `capacity` random prototypes drawn from `num_classes` ids.
pub fn full_store(num_classes: usize, capacity: usize, dim: usize, seed: u64) -> PrototypeStore {
    let mut rng = stream_rng(seed, 0);
    let mut store = PrototypeStore::new(dim, capacity);
    let ids = rand::seq::index::sample(&mut rng, num_classes, capacity);
    for (c, p) in ids.iter().zip(random_units(capacity, dim, &mut rng)) {
        store
            .enqueue(ClassId(c as u32), &p, 0)
            .expect("fresh store has room");
    }
    store
}

pub fn weight_matrix(num_classes: usize, dim: usize, seed: u64) -> FullWeightMatrix {
    FullWeightMatrix::random(num_classes, dim, &mut stream_rng(seed, 1))
}

/// `groups` classes with `k` embeddings each.
pub fn batch(
    num_classes: usize,
    groups: usize,
    k: usize,
    dim: usize,
    seed: u64,
) -> Vec<(ClassId, Vec<UnitVector>)> {
    let mut rng = stream_rng(seed, 2);
    rand::seq::index::sample(&mut rng, num_classes, groups)
        .iter()
        .map(|c| (ClassId(c as u32), random_units(k, dim, &mut rng)))
        .collect()
}
