use jointdiff::categorical::{d3pm_posterior, d3pm_sample, d3pm_step, sample_categorical, FinalDecode, OneHot};
use jointdiff::schedule::{cosine_discrete_schedule, DiscreteSchedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn freq_within_3se(counts: &[usize], probs: &[f64]) {
    let n: usize = counts.iter().sum();
    for (c, p) in counts.iter().zip(probs) {
        let f = *c as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((f - p).abs() <= 3.0 * se + 1e-12, "freq {f} vs p {p}");
    }
}

/// `p(z_{t_prev} = j, z_t = z | x0)` by summing over every path of the chain.
fn enumerate(s: &DiscreteSchedule, x0: usize, t: usize, t_prev: usize, z: usize) -> Vec<f64> {
    let k = s.categories();
    let q = |u: usize, a: usize, b: usize| s.transition(u).unwrap().get(a, b);
    let mut out = vec![0.0; k];
    let mut path = vec![0usize; t + 1];
    fn rec(
        depth: usize,
        t: usize,
        k: usize,
        path: &mut Vec<usize>,
        f: &mut dyn FnMut(&[usize]),
    ) {
        if depth > t {
            f(path);
            return;
        }
        for c in 0..k {
            path[depth] = c;
            rec(depth + 1, t, k, path, f);
        }
    }
    path[0] = x0;
    rec(1, t, k, &mut path, &mut |p: &[usize]| {
        if p[t] != z {
            return;
        }
        let prob: f64 = (1..=t).map(|u| q(u, p[u - 1], p[u])).product();
        out[p[t_prev]] += prob;
    });
    out
}

#[test]
fn two_step_posterior_matches_eight_path_enumeration() {
    let s = DiscreteSchedule::from_betas(2, vec![0.5, 0.5]).unwrap();
    let joint = enumerate(&s, 0, 2, 1, 0);
    let norm: f64 = joint.iter().sum();
    let got = d3pm_posterior(&OneHot::hard(2, 0).unwrap(), &OneHot::hard(2, 0).unwrap(), 2, 1, &s).unwrap();
    // by hand: [0.75 * 0.75, 0.25 * 0.25] / 0.625
    assert!((got.probs()[0] - 0.9).abs() < 1e-12);
    for (g, j) in got.probs().iter().zip(&joint) {
        assert!((g - j / norm).abs() < 1e-12);
    }
}

#[test]
fn exhaustive_equivalence_small_chains() {
    let betas = [0.05, 0.33, 0.71, 0.2];
    for k in 2..=3 {
        for t_max in 1..=4 {
            let s = DiscreteSchedule::from_betas(k, betas[..t_max].to_vec()).unwrap();
            for t in 1..=t_max {
                for t_prev in 0..t {
                    for x0 in 0..k {
                        for z in 0..k {
                            let joint = enumerate(&s, x0, t, t_prev, z);
                            let norm: f64 = joint.iter().sum();
                            let got = d3pm_posterior(
                                &OneHot::hard(k, z).unwrap(),
                                &OneHot::hard(k, x0).unwrap(),
                                t,
                                t_prev,
                                &s,
                            )
                            .unwrap();
                            for (g, j) in got.probs().iter().zip(&joint) {
                                assert!((g - j / norm).abs() < 1e-9);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// With a hard clean class, jumping t -> t_m -> t_prev through soft
/// posteriors reproduces the direct jump.
#[test]
fn jump_composition_through_intermediate_step() {
    let s = DiscreteSchedule::from_betas(3, vec![0.1, 0.4, 0.3, 0.6]).unwrap();
    for x0 in 0..3 {
        let x = OneHot::hard(3, x0).unwrap();
        for z in 0..3 {
            let zt = OneHot::hard(3, z).unwrap();
            let direct = d3pm_posterior(&zt, &x, 4, 1, &s).unwrap();
            let first = d3pm_posterior(&zt, &x, 4, 2, &s).unwrap();
            let mut mixed = [0.0; 3];
            for (m, w) in first.probs().iter().enumerate() {
                let second = d3pm_posterior(&OneHot::hard(3, m).unwrap(), &x, 2, 1, &s).unwrap();
                for (o, p) in mixed.iter_mut().zip(second.probs()) {
                    *o += w * p;
                }
            }
            for (a, b) in mixed.iter().zip(direct.probs()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn forward_sampling_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let s = DiscreteSchedule::from_betas(2, vec![0.5, 0.5]).unwrap();
    let z0 = OneHot::hard(2, 0).unwrap();
    let mut counts = [0usize; 2];
    for _ in 0..n {
        counts[d3pm_sample(&z0, 2, &s, &mut rng).unwrap().argmax()] += 1;
    }
    freq_within_3se(&counts, &[0.625, 0.375]);

    let c = cosine_discrete_schedule(1000, 3).unwrap();
    let z0 = OneHot::hard(3, 2).unwrap();
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[d3pm_sample(&z0, 1000, &c, &mut rng).unwrap().argmax()] += 1;
    }
    freq_within_3se(&counts, &[1.0 / 3.0; 3]);
}

#[test]
fn chained_single_steps_match_cumulative_marginal() {
    let s = DiscreteSchedule::from_betas(3, vec![0.2, 0.5, 0.1, 0.7]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let mut c = 1;
        for t in 1..=4 {
            c = sample_categorical(s.transition(t).unwrap().row(c), &mut rng);
        }
        counts[c] += 1;
    }
    freq_within_3se(&counts, s.cumulative_transition(4).unwrap().row(1));
}

#[test]
fn reverse_step_frequencies_match_posterior() {
    let s = cosine_discrete_schedule(10, 3).unwrap();
    let zt = OneHot::hard(3, 1).unwrap();
    let logits = [0.3, -0.2, 1.1];
    let x0 = OneHot::soft(jointdiff::categorical::softmax(&logits).unwrap()).unwrap();
    let post = d3pm_posterior(&zt, &x0, 7, 3, &s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let z = d3pm_step(&zt, &logits, 7, 3, &s, FinalDecode::Argmax, &mut rng).unwrap();
        counts[z.argmax()] += 1;
    }
    freq_within_3se(&counts, post.probs());
}

#[test]
fn final_step_decodes_by_argmax() {
    let s = cosine_discrete_schedule(10, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for c in 0..2 {
        let mut logits = [0.0; 2];
        logits[c] = 40.0;
        for z in 0..2 {
            let out = d3pm_step(&OneHot::hard(2, z).unwrap(), &logits, 3, 0, &s, FinalDecode::Argmax, &mut rng).unwrap();
            assert_eq!(out.argmax(), c);
        }
    }
}

proptest! {
    #[test]
    fn posterior_is_normalised(
        betas in prop::collection::vec(0.01f64..0.99, 2..6),
        raw in prop::collection::vec(0.0f64..1.0, 3),
        z in 0usize..3,
        pick in 0usize..100,
    ) {
        let s = DiscreteSchedule::from_betas(3, betas.clone()).unwrap();
        let total: f64 = raw.iter().sum::<f64>() + 1e-3;
        let probs: Vec<f64> = raw.iter().map(|r| (r + 1e-3 / 3.0) / total).collect();
        let x0 = OneHot::soft(probs).unwrap();
        let t = 1 + pick % betas.len();
        let t_prev = pick % t;
        let post = d3pm_posterior(&OneHot::hard(3, z).unwrap(), &x0, t, t_prev, &s).unwrap();
        prop_assert!((post.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(post.probs().iter().all(|p| *p >= 0.0));
    }
}
