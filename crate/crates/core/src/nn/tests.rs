use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::*;
use crate::error::Error;

fn random_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(rng.random_range(-1.0..1.0))).unwrap()
}

/// Values in ±[0.1, 1], away from the relu kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .unwrap()
}

/// Direct nested-loop cross-correlation.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [o, _, kh, kw] = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let (xv, wv, bv) = (
        g.input(x.clone()).unwrap(),
        g.input(w.clone()).unwrap(),
        g.input(b.clone()).unwrap(),
    );
    let y = g.conv2d(xv, wv, bv, s, p).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_1x1_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f64> = random_tensor(&mut rng, &[2, 1, 5, 7]);
    let w = Tensor::full(&[1, 1, 1, 1], 1.0).unwrap();
    let b = Tensor::zeros(&[1]).unwrap();
    assert_eq!(run_conv(&x, &w, &b, 1, 0), x);
}

#[test]
fn conv_all_ones_padded() {
    let x = Tensor::full(&[1, 1, 4, 4], 1.0f64).unwrap();
    let w = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
    let b = Tensor::zeros(&[1]).unwrap();
    let y = run_conv(&x, &w, &b, 1, 1);
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    #[rustfmt::skip]
    let expected = [
        4.0, 6.0, 6.0, 4.0,
        6.0, 9.0, 9.0, 6.0,
        6.0, 9.0, 9.0, 6.0,
        4.0, 6.0, 6.0, 4.0,
    ];
    assert_eq!(y.data(), &expected);
}

#[test]
fn conv_matches_naive_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[2, 3, 5, 5]);
        let w = random_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = random_tensor(&mut rng, &[4]);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let fast = run_conv(&x, &w, &b, s, p);
            let slow = naive_conv(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-5 * e.abs().max(1e-12), "{a} vs {e}");
            }
        }
    }
}

#[test]
fn conv_f32_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor::<f64>(&mut rng, &[2, 3, 5, 5]);
    let w = random_tensor::<f64>(&mut rng, &[4, 3, 3, 3]);
    let b = random_tensor::<f64>(&mut rng, &[4]);
    let slow = naive_conv(&x, &w, &b, 1, 1);
    let mut g = Graph::<f32>::new();
    let (xv, wv, bv) = (
        g.input(x.cast()).unwrap(),
        g.input(w.cast()).unwrap(),
        g.input(b.cast()).unwrap(),
    );
    let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
    assert!(g.value(y).cast::<f64>().max_abs_diff(&slow) < 1e-5);
}

#[test]
fn conv_linearity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_tensor::<f64>(&mut rng, &[1, 2, 6, 6]);
    let c = random_tensor::<f64>(&mut rng, &[1, 2, 6, 6]);
    let w = random_tensor::<f64>(&mut rng, &[3, 2, 3, 3]);
    let b = Tensor::zeros(&[3]).unwrap();
    let sum = Tensor::new(
        a.shape(),
        a.data().iter().zip(c.data()).map(|(x, y)| x + y).collect(),
    )
    .unwrap();
    let lhs = run_conv(&sum, &w, &b, 1, 1);
    let ra = run_conv(&a, &w, &b, 1, 1);
    let rc = run_conv(&c, &w, &b, 1, 1);
    for ((l, x), y) in lhs.data().iter().zip(ra.data()).zip(rc.data()) {
        let r = x + y;
        assert!((l - r).abs() <= 1e-5 * r.abs().max(1e-9));
    }
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]).unwrap()).unwrap();
    let w = g.input(Tensor::zeros(&[1, 3, 3, 3]).unwrap()).unwrap();
    let b = g.input(Tensor::zeros(&[1]).unwrap()).unwrap();
    assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(Error::Shape { .. })));
    let w = g.input(Tensor::zeros(&[1, 2, 7, 7]).unwrap()).unwrap();
    assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(Error::Shape { .. })));
    let w = g.input(Tensor::zeros(&[1, 2, 3, 3]).unwrap()).unwrap();
    assert!(matches!(g.conv2d(x, w, b, 0, 1), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_is_rejected() {
    let mut g = Graph::<f32>::new();
    assert!(matches!(
        g.input(Tensor::full(&[2], f32::NAN).unwrap()),
        Err(Error::NonFinite(_))
    ));
    let big = g.input(Tensor::full(&[1, 1, 1, 1], f32::MAX).unwrap()).unwrap();
    assert!(matches!(g.add(big, big), Err(Error::NonFinite(_))));
}

#[test]
fn zero_size_rejected() {
    assert!(Tensor::<f32>::zeros(&[0, 3]).is_err());
    assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn add_requires_equal_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(&[1, 1, 2, 2]).unwrap()).unwrap();
    let b = g.input(Tensor::zeros(&[1, 1, 2, 3]).unwrap()).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn mse_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor::<f32>(&mut rng, &[1, 2, 3, 3]);
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let l = g.mse(xv, &x).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);

    let half = g.input(Tensor::full(&[10], 0.5).unwrap()).unwrap();
    let l = g.mse(half, &Tensor::zeros(&[10]).unwrap()).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.25);
}

#[test]
fn mse_fully_masked_is_zero() {
    let mut g = Graph::<f32>::new();
    let p = g.input(Tensor::full(&[1, 2, 2, 2], 3.0).unwrap()).unwrap();
    let t = Tensor::zeros(&[1, 2, 2, 2]).unwrap();
    let l = g.mse_masked(p, &t, Some(&[false, false]), 1.0).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
    let l = g.mse_masked(p, &t, Some(&[true, false]), 1.0).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 9.0);
    assert!(g.mse_masked(p, &t, Some(&[true]), 1.0).is_err());
}

#[test]
fn upsample_preserves_constants() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(&[1, 2, 3, 5], 0.7).unwrap()).unwrap();
    for factor in 1..4 {
        let y = g.upsample_bilinear(x, factor).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 3 * factor, 5 * factor]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }
    assert!(g.upsample_bilinear(x, 0).is_err());
}

#[test]
fn downsample_block_mean() {
    let mut g = Graph::<f32>::new();
    let x = g
        .input(Tensor::new(&[1, 1, 2, 4], vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 4.0, 0.0]).unwrap())
        .unwrap();
    let y = g.downsample_stride(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 1.0]);
    assert!(g.downsample_stride(x, 3).is_err());
    let same = g.downsample_stride(x, 1).unwrap();
    assert_eq!(g.value(same), g.value(x));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 1, 2, 2]).unwrap()).unwrap();
    let y = g.relu(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    let mut inf = Graph::<f32>::inference();
    let x = inf.input(Tensor::scalar(1.0)).unwrap();
    assert!(matches!(inf.backward(x), Err(Error::Usage(_))));
}

#[test]
fn self_target_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    let p = store.register("p", random_tensor(&mut rng, &[1, 1, 3, 3])).unwrap();
    let mut g = Graph::new();
    let pv = g.param(&store, p).unwrap();
    let detached = store.get(p).value.clone();
    let loss = g.mse(pv, &detached).unwrap();
    g.backward(loss).unwrap().accumulate_into(&mut store);
    assert!(store.get(p).grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_loss_gradient_is_input() {
    // sum(w ⊙ x) as a 1x1 convolution reducing over channels.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor::<f64>(&mut rng, &[1, 6, 1, 1]);
    let mut store = ParamStore::new();
    let w = store.register("w", random_tensor(&mut rng, &[1, 6, 1, 1])).unwrap();
    let b = store.register("b", Tensor::zeros(&[1]).unwrap()).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let (wv, bv) = (g.param(&store, w).unwrap(), g.param(&store, b).unwrap());
    let y = g.conv2d(xv, wv, bv, 1, 0).unwrap();
    let grads = g.backward(y).unwrap();
    grads.accumulate_into(&mut store);
    assert_eq!(store.get(w).grad.data(), x.data());
    assert_eq!(store.get(b).grad.data(), &[1.0]);

    // second call without reset accumulates
    grads.accumulate_into(&mut store);
    let doubled: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(store.get(w).grad.data(), doubled.as_slice());
    store.zero_grad();
    assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
}

/// Builds `loss(store)` on a fresh graph and returns (loss, graph-backward grads in store).
fn check_layer<F>(seeds: std::ops::Range<u64>, build: F)
where
    F: Fn(&mut ChaCha8Rng) -> (ParamStore<f64>, Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var>),
{
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut store, f) = build(&mut rng);
        let mut g = Graph::new();
        let loss = f(&mut g, &store);
        g.backward(loss).unwrap().accumulate_into(&mut store);
        let report = gradcheck::check(&mut store, 100, 1e-3, seed, |s| {
            let mut g = Graph::new();
            let l = f(&mut g, s);
            Ok(g.value(l).item().unwrap())
        })
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-5,
            "seed {seed}: worst {:?}",
            report.worst()
        );
    }
}

#[test]
fn gradcheck_conv2d() {
    check_layer(0..10, |rng| {
        let mut s = ParamStore::new();
        let x = s.register("x", random_tensor(rng, &[2, 3, 6, 5])).unwrap();
        let w = s.register("w", random_tensor(rng, &[4, 3, 3, 3])).unwrap();
        let b = s.register("b", random_tensor(rng, &[4])).unwrap();
        let stride = rng.random_range(1..=2);
        let target = random_tensor(rng, &[2, 4, (6 + 2 - 3) / stride + 1, (5 + 2 - 3) / stride + 1]);
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let (xv, wv, bv) = (g.param(s, x).unwrap(), g.param(s, w).unwrap(), g.param(s, b).unwrap());
            let y = g.conv2d(xv, wv, bv, stride, 1).unwrap();
            g.mse(y, &target).unwrap()
        };
        (s, Box::new(f))
    });
}

#[test]
fn gradcheck_relu() {
    check_layer(0..10, |rng| {
        let mut s = ParamStore::new();
        let x = s.register("x", off_kink(rng, &[2, 2, 4, 4])).unwrap();
        let target = random_tensor(rng, &[2, 2, 4, 4]);
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.param(s, x).unwrap();
            let y = g.relu(xv).unwrap();
            g.mse(y, &target).unwrap()
        };
        (s, Box::new(f))
    });
}

#[test]
fn gradcheck_add() {
    check_layer(0..10, |rng| {
        let mut s = ParamStore::new();
        let a = s.register("a", random_tensor(rng, &[1, 2, 3, 3])).unwrap();
        let b = s.register("b", random_tensor(rng, &[1, 2, 3, 3])).unwrap();
        let target = random_tensor(rng, &[1, 2, 3, 3]);
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let (av, bv) = (g.param(s, a).unwrap(), g.param(s, b).unwrap());
            let y = g.add(av, bv).unwrap();
            let y = g.add(y, av).unwrap();
            g.mse(y, &target).unwrap()
        };
        (s, Box::new(f))
    });
}

#[test]
fn gradcheck_upsample() {
    check_layer(0..10, |rng| {
        let mut s = ParamStore::new();
        let x = s.register("x", random_tensor(rng, &[1, 2, 3, 4])).unwrap();
        let factor = rng.random_range(1..=3);
        let target = random_tensor(rng, &[1, 2, 3 * factor, 4 * factor]);
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.param(s, x).unwrap();
            let y = g.upsample_bilinear(xv, factor).unwrap();
            g.mse(y, &target).unwrap()
        };
        (s, Box::new(f))
    });
}

#[test]
fn gradcheck_downsample() {
    check_layer(0..10, |rng| {
        let mut s = ParamStore::new();
        let x = s.register("x", random_tensor(rng, &[2, 1, 4, 8])).unwrap();
        let target = random_tensor(rng, &[2, 1, 2, 4]);
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.param(s, x).unwrap();
            let y = g.downsample_stride(xv, 2).unwrap();
            g.mse(y, &target).unwrap()
        };
        (s, Box::new(f))
    });
}

#[test]
fn gradcheck_masked_mse() {
    check_layer(0..10, |rng| {
        let mut s = ParamStore::new();
        let x = s.register("x", random_tensor(rng, &[2, 3, 3, 3])).unwrap();
        let target = random_tensor(rng, &[2, 3, 3, 3]);
        let mask: Vec<bool> = (0..6).map(|i| i % 4 != 1).collect();
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.param(s, x).unwrap();
            let a = g.mse_masked(xv, &target, Some(&mask), 0.5).unwrap();
            let b = g.mse_masked(xv, &target, None, 0.5).unwrap();
            g.add(a, b).unwrap()
        };
        (s, Box::new(f))
    });
}

#[test]
fn adam_with_zero_lr_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f32>::new();
    let p = store.register("p", random_tensor(&mut rng, &[3, 3])).unwrap();
    let before = store.get(p).value.clone();
    let mut adam = Adam::new(&store, AdamConfig::default());
    for _ in 0..10 {
        store.get_mut(p).grad = random_tensor(&mut rng, &[3, 3]);
        adam.step(&mut store, 0.0);
    }
    assert_eq!(store.get(p).value, before);
}

#[test]
fn adam_descends_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let p = store.register("p", Tensor::full(&[1, 1, 1, 4], 2.0).unwrap()).unwrap();
    let target = Tensor::zeros(&[1, 1, 1, 4]).unwrap();
    let mut adam = Adam::new(&store, AdamConfig::default());
    for _ in 0..500 {
        store.zero_grad();
        let mut g = Graph::new();
        let v = g.param(&store, p).unwrap();
        let l = g.mse(v, &target).unwrap();
        g.backward(l).unwrap().accumulate_into(&mut store);
        adam.step(&mut store, 0.05);
    }
    assert!(store.get(p).value.data().iter().all(|v| v.abs() < 1e-2));
}

#[test]
fn clip_grad_norm_rescales() {
    let mut store = ParamStore::<f32>::new();
    let p = store.register("p", Tensor::zeros(&[2]).unwrap()).unwrap();
    store.get_mut(p).grad = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
    assert_eq!(store.clip_grad_norm(1.0), 5.0);
    assert!((store.grad_norm() - 1.0).abs() < 1e-6);
    assert_eq!(store.clip_grad_norm(10.0), store.grad_norm());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor::<f32>(&mut rng, &[2, 3, 8, 8]);
        let w = random_tensor::<f32>(&mut rng, &[4, 3, 3, 3]);
        let b = random_tensor::<f32>(&mut rng, &[4]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x).unwrap(), g.input(w).unwrap(), g.input(b).unwrap());
        let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.upsample_bilinear(y, 2).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
