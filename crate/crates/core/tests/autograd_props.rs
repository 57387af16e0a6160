use jointdiff::autograd::{grad_check, GradCheckOptions, Graph, Var};
use jointdiff::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn one_by_one_convolution_scales_and_its_gradient_is_a_dot_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let up = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.param(Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap());
    let y = g.conv2d(xv, k, None).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - 2.5 * b).abs() < 1e-15);
    }
    let u = g.constant(up.clone());
    let p = g.mul(y, u).unwrap();
    let l = g.sum(p).unwrap();
    let grads = g.backward(l).unwrap();
    let want: f64 = x.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
    assert!((grads.get(k).unwrap()[0] - want).abs() < 1e-12);
    let r = grad_check(
        |g, p| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, p[0], None)?;
            let u = g.constant(up.clone());
            let m = g.mul(y, u)?;
            g.sum(m)
        },
        &[Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap()],
        1e-8,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn mean_silu_of_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = rand_tensor(&mut rng, &[4, 4]);
    let x = rand_tensor(&mut rng, &[4, 1]);
    let r = grad_check(
        |g, p| {
            let y = g.matmul(p[0], p[1])?;
            let s = g.silu(y)?;
            g.mean(s)
        },
        &[w, x],
        1e-4,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn softmax_cross_entropy_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = rand_tensor(&mut rng, &[3, 4]);
    let onehot = Tensor::new(
        vec![3, 4],
        vec![0., 1., 0., 0., 1., 0., 0., 0., 0., 0., 0., 1.],
    )
    .unwrap();
    let r = grad_check(
        |g, p| {
            let s = g.softmax(p[0])?;
            let t = g.constant(onehot.clone());
            let picked = g.mul(s, t)?;
            let pr = g.sum(picked)?;
            let ls = g.log_softmax(p[0])?;
            let t = g.constant(onehot.clone());
            let ce = g.mul(ls, t)?;
            let ce = g.sum(ce)?;
            let ce = g.scale(ce, -1.0 / 3.0)?;
            g.add(ce, pr)
        },
        &[logits],
        1e-6,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn shared_subexpression_accumulates_like_unrolled_tree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[5]);
    // shared: h = silu(x); y = h * h + h
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let h = g.silu(xv).unwrap();
    let hh = g.mul(h, h).unwrap();
    let y = g.add(hh, h).unwrap();
    let l = g.sum(y).unwrap();
    let shared = g.backward(l).unwrap().get(xv).unwrap().to_vec();
    // unrolled: three independent copies of silu(x)
    let mut g = Graph::new();
    let xv = g.param(x);
    let h1 = g.silu(xv).unwrap();
    let h2 = g.silu(xv).unwrap();
    let h3 = g.silu(xv).unwrap();
    let hh = g.mul(h1, h2).unwrap();
    let y = g.add(hh, h3).unwrap();
    let l = g.sum(y).unwrap();
    let unrolled = g.backward(l).unwrap().get(xv).unwrap().to_vec();
    for (a, b) in shared.iter().zip(&unrolled) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn zero_upstream_gives_exact_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.param(rand_tensor(&mut rng, &[1, 4, 4, 4]));
    let w = g.param(rand_tensor(&mut rng, &[4, 4, 3, 3]));
    let gamma = g.param(rand_tensor(&mut rng, &[4]));
    let beta = g.param(rand_tensor(&mut rng, &[4]));
    let y = g.conv2d(x, w, None).unwrap();
    let y = g.group_norm(y, gamma, beta, 2).unwrap();
    let y = g.silu(y).unwrap();
    let s = g.sum(y).unwrap();
    let l = g.scale(s, 0.0).unwrap();
    let grads = g.backward(l).unwrap();
    for v in [x, w, gamma, beta] {
        assert!(grads.get_or_zeros(&g, v).iter().all(|d| *d == 0.0));
    }
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    assert!(g.backward(x).is_err());
}

fn chain(g: &mut Graph<f64>, p: &[Var], groups: usize) -> jointdiff::Result<Var> {
    let y = g.conv2d(p[0], p[1], Some(p[2]))?;
    let y = g.group_norm(y, p[3], p[4], groups)?;
    let y = g.silu(y)?;
    let y = g.avg_pool2(y)?;
    let y = g.upsample2(y)?;
    let y = g.concat_channels(y, p[0])?;
    let y = g.global_avg_pool(y)?;
    let y = g.mul(y, y)?;
    g.mean(y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_composites_match_finite_differences(seed in 0u64..10_000, cout in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2 * cout;
        let mut gamma = rand_tensor(&mut rng, &[c]);
        for v in gamma.data_mut() {
            *v += 2.0;
        }
        let params = vec![
            rand_tensor(&mut rng, &[2, 2, 4, 4]),
            rand_tensor(&mut rng, &[c, 2, 3, 3]),
            rand_tensor(&mut rng, &[c]),
            gamma,
            rand_tensor(&mut rng, &[c]),
        ];
        let r = grad_check(|g, p| chain(g, p, cout), &params, 1e-4, GradCheckOptions::default()).unwrap();
        prop_assert!(r.passed(), "{:?}", r);
    }
}
