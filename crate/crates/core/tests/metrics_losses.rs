use covernet::autodiff::{Reduction, Tape};
use covernet::losses::{multitask_loss, segmentation_loss, BatchTargets, LossConfig, MaskPair};
use covernet::metrics::{lcc, miou, object_stats};
use covernet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_pass_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx.sqrt() * syy.sqrt())
}

fn vec_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..60).prop_flat_map(|n| (prop::collection::vec(-50.0f64..50.0, n), prop::collection::vec(-50.0f64..50.0, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn lcc_affine_invariance((x, y) in vec_strategy(), a in 0.1f64..10.0, b in -20.0f64..20.0) {
        let base = lcc(&x, &y).unwrap();
        let shifted: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        prop_assert!((lcc(&x, &shifted).unwrap() - base).abs() < 1e-6);
        let negated: Vec<f64> = y.iter().map(|v| -a * v + b).collect();
        prop_assert!((lcc(&x, &negated).unwrap() + base).abs() < 1e-6);
    }

    #[test]
    fn miou_permutation_invariance(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truths: Vec<Vec<u8>> = (0..n).map(|_| (0..16).map(|_| rng.random_range(0..2u8)).collect()).collect();
        let preds: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.random::<f64>()).collect()).collect();
        let base = miou(&truths, &preds, 0.5).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(seed as usize % n);
        let t2: Vec<_> = order.iter().map(|&i| truths[i].clone()).collect();
        let p2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
        prop_assert_eq!(miou(&t2, &p2, 0.5).unwrap(), base);
    }

    #[test]
    fn confident_truth_beats_uniform(truth in prop::collection::vec(0u8..2, 2..40)) {
        prop_assume!(truth.contains(&0) && truth.contains(&1));
        let exact: Vec<f64> = truth.iter().map(|&t| t as f64).collect();
        let sharp = segmentation_loss(&MaskPair::new(truth.clone(), exact).unwrap(), Reduction::Mean);
        let flat = segmentation_loss(&MaskPair::new(truth.clone(), vec![0.5; truth.len()]).unwrap(), Reduction::Mean);
        prop_assert!(sharp < flat);
    }

    #[test]
    fn block_centroid_matches_hand_computation(r in 0usize..9, c in 0usize..9) {
        let mut m = vec![0u8; 100];
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            m[(r + dr) * 10 + c + dc] = 1;
        }
        let s = object_stats(&m, 10, 10);
        let (row, col) = s.centroid.unwrap();
        prop_assert!((row - (r as f64 + 1.0) / 10.0).abs() < 1e-12);
        prop_assert!((col - (c as f64 + 1.0) / 10.0).abs() < 1e-12);
    }
}

#[test]
fn lcc_matches_two_pass_oracle_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let n = rng.random_range(2..200);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * rng.random_range(-2.0..2.0) + rng.random_range(-50.0..50.0)).collect();
        let ours = lcc(&x, &y).unwrap();
        assert!((ours - two_pass_pearson(&x, &y)).abs() < 1e-6);
    }
}

#[test]
fn miou_matches_brute_force_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let truth: Vec<u8> = (0..64).map(|_| rng.random_range(0..2u8)).collect();
        let pred: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let (mut inter_fg, mut union_fg, mut inter_bg, mut union_bg) = (0, 0, 0, 0);
        for (t, p) in truth.iter().zip(&pred) {
            let (t, p) = (*t == 1, *p >= 0.5);
            inter_fg += (t && p) as u32;
            union_fg += (t || p) as u32;
            inter_bg += (!t && !p) as u32;
            union_bg += (!t || !p) as u32;
        }
        let mut ious = Vec::new();
        if union_fg > 0 {
            ious.push(inter_fg as f64 / union_fg as f64);
        }
        if union_bg > 0 {
            ious.push(inter_bg as f64 / union_bg as f64);
        }
        let expected = ious.iter().sum::<f64>() / ious.len() as f64;
        assert_eq!(miou(&[truth], &[pred], 0.5).unwrap().miou, expected);
    }
}

fn leaves(tape: &mut Tape<f64>, n: usize) -> (covernet::Var, covernet::Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let c = tape.leaf(Tensor::from_fn([n, 1], |_| rng.random_range(0.1..0.9)), true);
    let m = tape.leaf(Tensor::from_fn([n, 1, 4, 4], |_| rng.random_range(0.1..0.9)), true);
    (c, m)
}

#[test]
fn fully_gated_batch_gives_bitwise_zero_mask_gradient() {
    let mut tape = Tape::new();
    let (c, m) = leaves(&mut tape, 3);
    let targets = BatchTargets {
        scores: vec![1.0, 1.9, 2.3],
        masks: Tensor::from_fn([3, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64),
    };
    let (loss, parts) = multitask_loss(&mut tape, c, m, &targets, &LossConfig::default()).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(parts.gated_count, 0);
    assert_eq!(parts.seg_term, 0.0);
    assert!(tape.grad_or_zeros(m).data().iter().all(|&g| g.to_bits() == 0));
    assert!(tape.grad_or_zeros(c).data().iter().any(|&g| g != 0.0));
}

#[test]
fn one_gated_sample_reaches_the_mask() {
    let mut tape = Tape::new();
    let (c, m) = leaves(&mut tape, 2);
    let targets = BatchTargets {
        scores: vec![2.31, 1.0],
        masks: Tensor::from_fn([2, 1, 4, 4], |i| (i % 2) as f64),
    };
    let (loss, _) = multitask_loss(&mut tape, c, m, &targets, &LossConfig::default()).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad_or_zeros(m);
    assert!(g.data()[..16].iter().any(|&v| v != 0.0));
    assert!(g.data()[16..].iter().all(|&v| v == 0.0));
}

#[test]
fn sum_reduction_scales_with_pixels() {
    let truth = vec![1u8, 0, 1, 1];
    let probs = vec![0.7, 0.2, 0.6, 0.9];
    let pair = MaskPair::new(truth, probs).unwrap();
    let mean = segmentation_loss(&pair, Reduction::Mean);
    let sum = segmentation_loss(&pair, Reduction::Sum);
    assert!((sum - 4.0 * mean).abs() < 1e-12);
}
