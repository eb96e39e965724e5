use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsbnet::gradient_suite::{run_target, Precision, Target};
use tsbnet::nn::conv::{conv2d_backward, conv2d_forward};
use tsbnet::nn::{maxpool2_backward, maxpool2_forward, residual_add_backward, sgd_step, Param, TrainConfig};
use tsbnet::Tensor;

/// Direct cross-correlation with zero padding, one output element at a time.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [ko, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * ko * h * wd];
    for img in 0..n {
        for o in 0..ko {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = y as isize + dy as isize - pad;
                                let sx = xx as isize + dx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((img * c + ci) * h + sy as usize) * wd + sx as usize];
                                let wv = w.data()[((o * c + ci) * k + dy) * k + dx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((img * ko + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn conv_matches_quadruple_loop_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for instance in 0..150 {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let h = rng.random_range(1..=9);
        let w = rng.random_range(1..=9);
        let ko = rng.random_range(1..=4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let x = random_tensor(&[n, c, h, w], &mut rng);
        let wt = random_tensor(&[ko, c, k, k], &mut rng);
        let b = random_tensor(&[ko], &mut rng);
        let got = conv2d_forward(&x, &wt, &b).unwrap();
        let want = conv_reference(&x, &wt, b.data());
        for (g, r) in got.data().iter().zip(&want) {
            assert!((g - r).abs() <= 1e-12 * (1.0 + r.abs()), "instance {instance}: {g} vs {r}");
        }
    }
}

#[test]
fn conv_weight_gradient_matches_reference_contraction() {
    // dL/dW for L = <G, conv(x)> is the correlation of x with G, computed
    // here by perturbing one weight at a time through the reference (exact
    // because the reference is linear in W).
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&[2, 3, 6, 5], &mut rng);
    let w = random_tensor(&[2, 3, 3, 3], &mut rng);
    let b = random_tensor(&[2], &mut rng);
    let g = random_tensor(&[2, 2, 6, 5], &mut rng);
    let grads = conv2d_backward(&x, &w, &g).unwrap();
    let dot = |w: &Tensor<f64>| conv_reference(&x, w, b.data()).iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>();
    let base = dot(&w);
    for i in 0..w.len() {
        let mut e = w.clone();
        e.data_mut()[i] += 1.0;
        let want = dot(&e) - base;
        assert!((grads.weight.data()[i] - want).abs() < 1e-10 * (1.0 + want.abs()));
    }
    let bias_want: Vec<f64> = (0..2).map(|o| g.data()[o * 30..(o + 1) * 30].iter().sum::<f64>() + g.data()[60 + o * 30..60 + (o + 1) * 30].iter().sum::<f64>()).collect();
    for (got, want) in grads.bias.data().iter().zip(&bias_want) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn every_layer_passes_gradient_checks_in_both_precisions() {
    for target in [Target::Conv, Target::Pool, Target::Fc, Target::Prelu, Target::Residual, Target::Loss] {
        for precision in [Precision::Double, Precision::Single] {
            let report = run_target(target, precision, 3, 17).unwrap();
            assert!(report.passed(), "{target} {}: {:?}", precision.name(), report.worst);
            assert!(report.worst.probed > 0, "{target}: nothing probed");
        }
    }
}

proptest! {
    #[test]
    fn pool_backward_conserves_gradient_mass(
        seed in any::<u64>(),
        n in 1usize..3,
        c in 1usize..4,
        h in 1usize..5,
        w in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[n, c, 2 * h, 2 * w], &mut rng);
        let pooled = maxpool2_forward(&x).unwrap();
        let g = random_tensor(pooled.output.shape(), &mut rng);
        let gi = maxpool2_backward(x.shape(), &pooled.argmax, &g).unwrap();
        let (a, b): (f64, f64) = (gi.data().iter().sum(), g.data().iter().sum());
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        // Each output routes to exactly one input cell inside its window.
        prop_assert_eq!(gi.data().iter().filter(|v| **v != 0.0).count() <= g.len(), true);
    }

    #[test]
    fn residual_backward_copies_upstream(seed in any::<u64>(), len in 1usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_tensor(&[1, len], &mut rng);
        let (a, b) = residual_add_backward(&g);
        prop_assert_eq!(a.data(), g.data());
        prop_assert_eq!(b.data(), g.data());
    }

    #[test]
    fn sgd_with_zero_gradient_and_no_decay_is_identity(seed in any::<u64>(), iter in 0u64..10_000, len in 1usize..32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Param::new(random_tensor(&[len], &mut rng));
        let before = p.value.clone();
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::desk() };
        sgd_step(&mut [&mut p], &cfg, iter).unwrap();
        prop_assert_eq!(p.value, before);
    }
}
