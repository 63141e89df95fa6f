use covernet::autodiff::{ConvGeom, Tape};
use covernet::gradcheck::{finite_diff_grad_check, CheckOptions};
use covernet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `k x k` kernel spread to `(k-1)d+1` with zeros between taps.
fn zero_inflate(w: &Tensor<f64>, d: usize) -> Tensor<f64> {
    let [o, i, k, _] = w.dims4("inflate").unwrap();
    let kk = (k - 1) * d + 1;
    let mut out = Tensor::zeros([o, i, kk, kk]);
    for a in 0..o {
        for b in 0..i {
            for r in 0..k {
                for c in 0..k {
                    let src = ((a * i + b) * k + r) * k + c;
                    let dst = ((a * i + b) * kk + r * d) * kk + c * d;
                    out.data_mut()[dst] = w.data()[src];
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
    let mut t = Tape::new();
    let (x, w, b) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv2d(x, w, b, geom).unwrap();
    t.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dilation_equals_zero_inflated_kernel(
        seed in any::<u64>(),
        d in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..4,
        h in 5usize..9,
        w in 5usize..9,
        cin in 1usize..4,
        cout in 1usize..4,
    ) {
        let span = 2 * d + 1;
        prop_assume!(h + 2 * pad >= span && w + 2 * pad >= span);
        let x = random(&[2, cin, h, w], seed);
        let k = random(&[cout, cin, 3, 3], seed ^ 1);
        let b = random(&[cout], seed ^ 2);
        let dilated = conv(&x, &k, &b, ConvGeom::new(stride, pad, d));
        let inflated = conv(&x, &zero_inflate(&k, d), &b, ConvGeom::new(stride, pad, 1));
        prop_assert_eq!(dilated.shape(), inflated.shape());
        for (a, b) in dilated.data().iter().zip(inflated.data()) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn upsample_is_linear(
        seed in any::<u64>(),
        alpha in -3.0f32..3.0,
        beta in -3.0f32..3.0,
        factor in 1usize..5,
        h in 1usize..6,
        w in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f32> = Tensor::from_fn([1, 2, h, w], |_| rng.random_range(-1.0..1.0));
        let y: Tensor<f32> = Tensor::from_fn([1, 2, h, w], |_| rng.random_range(-1.0..1.0));
        let combo = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        let up = |t: &Tensor<f32>| {
            let mut tape = Tape::new();
            let v = tape.constant(t.clone());
            let u = tape.bilinear_upsample(v, factor).unwrap();
            tape.value(u).clone()
        };
        let (ux, uy, uc) = (up(&x), up(&y), up(&combo));
        for i in 0..uc.numel() {
            let lin = alpha * ux.data()[i] + beta * uy.data()[i];
            prop_assert!((uc.data()[i] - lin).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_relu_sum_chain_matches_finite_differences(seed in any::<u64>()) {
        let x = random(&[1, 2, 6, 6], seed);
        let w = random(&[3, 2, 3, 3], seed ^ 7);
        let b = Tensor::from_fn([3], |i| 0.3 + 0.1 * i as f64);
        let outcome = finite_diff_grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], ConvGeom::new(1, 1, 1))?;
                let r = t.relu(y)?;
                Ok(t.sum(r)?)
            },
            &[x, w, b],
            CheckOptions::default(),
        ).unwrap();
        prop_assert!(outcome.max_rel_error < 1e-3, "{}", outcome.max_rel_error);
    }
}

#[test]
fn parameter_used_twice_accumulates_both_paths() {
    // f(w) = sum(w * x) + sum(w * w) via conv paths sharing `w`.
    let x = random(&[1, 1, 4, 4], 3);
    let w = random(&[1, 1, 1, 1], 4);
    let zero = Tensor::zeros([1]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let wv = t.leaf(w.clone(), true);
    let bv = t.constant(zero);
    let a = t.conv2d(xv, wv, bv, ConvGeom::new(1, 0, 1)).unwrap();
    let b = t.conv2d(a, wv, bv, ConvGeom::new(1, 0, 1)).unwrap();
    let s1 = t.sum(a).unwrap();
    let s2 = t.sum(b).unwrap();
    let total = t.add(s1, s2).unwrap();
    t.backward(total).unwrap();
    // d/dw [w Sx + w^2 Sx] = Sx (1 + 2w)
    let sx: f64 = x.data().iter().sum();
    let expected = sx * (1.0 + 2.0 * w.data()[0]);
    assert!((t.grad(wv).unwrap().data()[0] - expected).abs() < 1e-12);
}

#[test]
fn identical_forward_passes_are_bitwise_equal() {
    let x = random(&[2, 3, 8, 8], 11).cast::<f32>();
    let w = random(&[4, 3, 3, 3], 12).cast::<f32>();
    let b = random(&[4], 13).cast::<f32>();
    let run = || {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.leaf(w.clone(), true), t.leaf(b.clone(), true));
        let y = t.conv2d(xv, wv, bv, ConvGeom::new(1, 2, 2)).unwrap();
        let p = t.max_pool2(y).unwrap();
        let u = t.bilinear_upsample(p, 2).unwrap();
        let s = t.sigmoid(u).unwrap();
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        (t.value(s).clone(), t.grad(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn unreachable_leaf_has_zero_grad() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::full([3], 1.0), true);
    let unused = t.leaf(Tensor::full([2], 5.0), true);
    let s = t.scale(x, 2.0).unwrap();
    let l = t.sum(s).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    assert_eq!(t.grad_or_zeros(unused).data(), &[0.0, 0.0]);
}
