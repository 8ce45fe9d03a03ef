mod common;

use common::*;
use proptest::prelude::*;
use protomem::encoder::LinearEncoder;
use protomem::losses::MarginLoss;
use protomem::sampling::stream_rng;
use protomem::vector::ClassId;
use protomem::weights::WeightView;

#[test]
fn cosface_gradients_match_finite_differences() {
    let (loss, encoder) = gradient_sweep(11, false, 100);
    assert!(loss < 1e-5, "worst loss gradient error {loss:e}");
    assert!(encoder < 1e-5, "worst encoder gradient error {encoder:e}");
}

#[test]
fn dsoftmax_gradients_match_finite_differences() {
    let (loss, encoder) = gradient_sweep(12, true, 100);
    assert!(loss < 1e-5, "worst loss gradient error {loss:e}");
    assert!(encoder < 1e-5, "worst encoder gradient error {encoder:e}");
}

fn grads(
    loss: MarginLoss,
    raws: &[Vec<f64>],
    protos: &[Vec<f64>],
    target: usize,
) -> protomem::LossGrad {
    let ids: Vec<ClassId> = (0..protos.len() as u32).map(ClassId).collect();
    let buffer = protos.concat();
    let view = WeightView::dense(protos[0].len(), ids, &buffer).unwrap();
    loss.backward(raws, &vec![Some(target); raws.len()], &view)
        .unwrap()
}

#[test]
fn saturated_cosface_has_vanishing_embedding_gradient() {
    // Target prototype on the embedding, the only negative antipodal.
    let loss = MarginLoss::CosFace {
        scale: 64.0,
        margin: 0.2,
    };
    let g = grads(
        loss,
        &[vec![1.0, 0.0, 0.0]],
        &[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]],
        0,
    );
    let n = g.d_embeddings[0].iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(n < 1e-6, "{n:e}");
}

#[test]
fn symmetric_cosines_give_prototype_gradients_along_the_embedding() {
    // x on the diagonal, prototypes on the axes: all cosines equal.
    let x = vec![1.0, 1.0, 1.0];
    let protos = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    let g = grads(
        MarginLoss::CosFace {
            scale: 8.0,
            margin: 0.0,
        },
        std::slice::from_ref(&x),
        &protos,
        1,
    );
    let mut sum = [0.0; 3];
    for v in g.d_prototypes.values() {
        for (s, c) in sum.iter_mut().zip(v) {
            *s += c;
        }
    }
    // Parallel to x: the cross product vanishes.
    let cross = [
        sum[1] * x[2] - sum[2] * x[1],
        sum[2] * x[0] - sum[0] * x[2],
        sum[0] * x[1] - sum[1] * x[0],
    ];
    assert!(cross.iter().all(|c| c.abs() < 1e-12), "{cross:?}");
}

#[test]
fn dsoftmax_without_negatives_touches_only_the_target() {
    let g = grads(
        MarginLoss::DSoftmax {
            scale: 16.0,
            termination: 0.3,
        },
        &[vec![0.3, 0.4, 0.5]],
        &[vec![0.0, 1.0, 0.0]],
        0,
    );
    assert_eq!(
        g.d_prototypes.keys().copied().collect::<Vec<_>>(),
        vec![ClassId(0)]
    );
}

#[test]
fn dsoftmax_intra_gradient_near_saturation() {
    // cos_y = 1 exactly: dL/dcos = -s * eps e^{-s} / (1 + eps e^{-s}), and
    // the prototype gradient is that factor times the embedding.
    let (s, d) = (32.0_f64, 0.5_f64);
    let eps = (d * s).exp();
    let expected = s * eps * (-s).exp() / (1.0 + eps * (-s).exp());
    let g = grads(
        MarginLoss::DSoftmax {
            scale: s,
            termination: d,
        },
        &[vec![0.0, 2.0]],
        &[vec![0.0, 1.0]],
        0,
    );
    let dp = &g.d_prototypes[&ClassId(0)];
    assert!(
        (dp[1] + expected).abs() < 1e-12 * expected.max(1.0),
        "{} vs {}",
        dp[1],
        -expected
    );
    assert_eq!(dp[0], 0.0);
}

#[test]
fn encoder_two_by_two_hand_case() {
    // W = I, x = (3, 4), one class P = (1, 0), CosFace s=1 m=0 with a
    // second class P = (0, 1). L = ln(e^{0.6} + e^{0.8}) - 0.6.
    let enc = LinearEncoder::identity(2);
    let protos = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let loss = MarginLoss::CosFace {
        scale: 1.0,
        margin: 0.0,
    };
    let g = grads(loss, &[enc.forward_raw(&[3.0, 4.0])], &protos, 0);
    assert!((g.loss - ((0.6f64).exp() + (0.8f64).exp()).ln() + 0.6).abs() < 1e-15);
    let analytic = enc.backward_raw(&[[3.0, 4.0]], &g.d_embeddings);
    let mut w = vec![1.0, 0.0, 0.0, 1.0];
    let h = 1e-6;
    for i in 0..4 {
        let f = |w: &[f64]| {
            let e = LinearEncoder::from_weights(2, 2, w.to_vec()).unwrap();
            reference_loss(&loss, &[e.forward_raw(&[3.0, 4.0])], &protos, &[0])
        };
        let orig = w[i];
        w[i] = orig + h;
        let up = f(&w);
        w[i] = orig - h;
        let down = f(&w);
        w[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        assert!(
            (analytic[i] - numeric).abs() < 1e-8,
            "entry {i}: {} vs {numeric}",
            analytic[i]
        );
    }
}

fn rotation(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a Gaussian matrix.
    let mut rng = stream_rng(seed, 0);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < dim {
        let mut v = gaussian(&mut rng, dim);
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

fn rotate(q: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    q.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn library_loss(
    loss: MarginLoss,
    raws: &[Vec<f64>],
    protos: &[Vec<f64>],
    targets: &[usize],
) -> f64 {
    let ids: Vec<ClassId> = (0..protos.len() as u32).map(ClassId).collect();
    let buffer = protos.concat();
    let view = WeightView::dense(protos[0].len(), ids, &buffer).unwrap();
    let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
    loss.backward(raws, &t, &view).unwrap().loss
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_ignore_the_order_of_negatives(seed in any::<u64>(), dsoftmax in any::<bool>(), shift in 1usize..9) {
        let mut rng = stream_rng(seed, 1);
        let loss = random_loss(&mut rng, dsoftmax);
        let inst = Instance::random(&mut rng, loss, 6, 10, 1);
        let before = library_loss(loss, &inst.raws, &inst.protos, &inst.targets);
        // Rotate the order of all prototypes and move the target with it.
        let n = inst.protos.len();
        let protos: Vec<Vec<f64>> = (0..n).map(|j| inst.protos[(j + shift) % n].clone()).collect();
        let target = (inst.targets[0] + n - shift) % n;
        let after = library_loss(loss, &inst.raws, &protos, &[target]);
        prop_assert!((before - after).abs() < 1e-12, "{before} vs {after}");
    }

    #[test]
    fn losses_are_rotation_invariant(seed in any::<u64>(), dsoftmax in any::<bool>()) {
        let mut rng = stream_rng(seed, 2);
        let loss = random_loss(&mut rng, dsoftmax);
        let inst = Instance::random(&mut rng, loss, 8, 12, 4);
        let q = rotation(8, seed);
        let raws: Vec<Vec<f64>> = inst.raws.iter().map(|v| rotate(&q, v)).collect();
        let protos: Vec<Vec<f64>> = inst.protos.iter().map(|v| rotate(&q, v)).collect();
        let a = library_loss(loss, &inst.raws, &inst.protos, &inst.targets);
        let b = library_loss(loss, &raws, &protos, &inst.targets);
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}
