//! Self-contained property suite behind the `check` command.

use jointdiff::autograd::{grad_check, GradCheckOptions, Graph, Var};
use jointdiff::categorical::{d3pm_posterior, OneHot};
use jointdiff::denoiser::{init_params, DenoiserConfig, DenoiserInput, HeadInit, Params};
use jointdiff::joint::{joint_loss, TrainingBatch};
use jointdiff::schedule::{cosine_discrete_schedule, DiscreteSchedule, GaussianScheduleSpec, Matrix};
use jointdiff::tensor::Tensor;
use jointdiff::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag}\t{}\t{}", self.name, self.detail)
    }
}

fn fail(name: &str, e: jointdiff::Error) -> CheckResult {
    CheckResult::new(name, false, format!("error: {e}"))
}

/// Alpha-bar recurrence, row-stochastic transitions and the uniform limit.
pub fn schedule_algebra() -> CheckResult {
    let name = "schedule-algebra";
    let run = || -> Result<(f64, f64, f64)> {
        let g = GaussianScheduleSpec::default().build()?;
        let mut rec = 0.0f64;
        for t in 1..=g.steps() {
            let want = g.alpha_bar(t - 1)? * (1.0 - g.beta(t)?);
            rec = rec.max((g.alpha_bar(t)? - want).abs());
        }
        let d = cosine_discrete_schedule(1000, 2)?;
        let mut stoch = 0.0f64;
        for t in 1..=d.steps() {
            for m in [d.transition(t)?, d.cumulative_transition(t)?] {
                for r in 0..m.dim() {
                    let row = m.row(r);
                    stoch = stoch.max((row.iter().sum::<f64>() - 1.0).abs());
                    if row.iter().any(|p| *p < 0.0) {
                        stoch = f64::INFINITY;
                    }
                }
            }
        }
        let last = d.cumulative_transition(d.steps())?;
        let uniform = Matrix::from_rows(&vec![vec![0.5; 2]; 2]);
        Ok((rec, stoch, last.max_abs_diff(&uniform)))
    };
    match run() {
        Ok((rec, stoch, unif)) => CheckResult::new(
            name,
            rec <= 1e-12 && stoch <= 1e-10 && unif <= 0.05,
            format!("recurrence {rec:.2e}, row sums {stoch:.2e}, |Qbar_T - U| {unif:.2e}"),
        ),
        Err(e) => fail(name, e),
    }
}

/// `p(z_prev = j, z_t = z | x0)` summed over every state path of the chain.
fn enumerate_joint(sched: &DiscreteSchedule, x0: usize, t: usize, t_prev: usize, z: usize) -> Result<Vec<f64>> {
    let k = sched.categories();
    let mut out = vec![0.0; k];
    let paths = k.pow(t as u32);
    for code in 0..paths {
        // states[s - 1] is the state at step s
        let mut c = code;
        let states: Vec<usize> = (0..t)
            .map(|_| {
                let s = c % k;
                c /= k;
                s
            })
            .collect();
        if states[t - 1] != z {
            continue;
        }
        let mut p = 1.0;
        let mut prev = x0;
        for (s, &cur) in states.iter().enumerate() {
            p *= sched.transition(s + 1)?.get(prev, cur);
            prev = cur;
        }
        let at_prev = if t_prev == 0 { x0 } else { states[t_prev - 1] };
        out[at_prev] += p;
    }
    Ok(out)
}

fn brute_force_schedules() -> Result<Vec<DiscreteSchedule>> {
    let betas = [0.15, 0.4, 0.27, 0.62];
    let mut out = Vec::new();
    for k in 2..=3 {
        for t in 1..=4 {
            out.push(DiscreteSchedule::from_betas(k, betas[..t].to_vec())?);
        }
    }
    Ok(out)
}

/// Posterior against exhaustive path enumeration, and jump composition.
pub fn d3pm_brute_force() -> CheckResult {
    let name = "d3pm-brute-force";
    let run = || -> Result<(f64, f64, usize)> {
        let (mut post_err, mut jump_err, mut cases) = (0.0f64, 0.0f64, 0);
        for sched in brute_force_schedules()? {
            let k = sched.categories();
            for t in 1..=sched.steps() {
                for t_prev in 0..t {
                    let jump = sched.transition_between(t_prev, t)?;
                    let composed = if t_prev == 0 {
                        jump.clone()
                    } else {
                        sched.cumulative_transition(t_prev)?.matmul(&jump)
                    };
                    jump_err = jump_err.max(composed.max_abs_diff(sched.cumulative_transition(t)?));
                    for x0 in 0..k {
                        for z in 0..k {
                            let joint = enumerate_joint(&sched, x0, t, t_prev, z)?;
                            let norm: f64 = joint.iter().sum();
                            let got = d3pm_posterior(&OneHot::hard(k, z)?, &OneHot::hard(k, x0)?, t, t_prev, &sched)?;
                            for (g, j) in got.probs().iter().zip(&joint) {
                                post_err = post_err.max((g - j / norm).abs());
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
        Ok((post_err, jump_err, cases))
    };
    match run() {
        Ok((p, j, n)) => CheckResult::new(
            name,
            p <= 1e-9 && j <= 1e-9,
            format!("{n} cases, posterior {p:.2e}, jump composition {j:.2e}"),
        ),
        Err(e) => fail(name, e),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(random_tensor(&mut rng, g.shape(y)));
    let p = g.mul(y, r)?;
    g.sum(p)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One named grad-check case per autograd primitive: (name, builder, inputs).
pub fn primitive_cases() -> Vec<(&'static str, Build, Vec<Tensor<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut t = |s: &[usize]| random_tensor(&mut rng, s);
    let mut gamma = t(&[4]);
    for v in gamma.data_mut() {
        *v += 1.5;
    }
    vec![
        ("add", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.add(p[0], p[1])?;
            project(g, y, 1)
        }) as Build, vec![t(&[2, 3]), t(&[2, 3])]),
        ("sub", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.sub(p[0], p[1])?;
            project(g, y, 2)
        }), vec![t(&[2, 3]), t(&[2, 3])]),
        ("mul", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.mul(p[0], p[1])?;
            project(g, y, 3)
        }), vec![t(&[2, 3]), t(&[2, 3])]),
        ("scale", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.scale(p[0], -1.7)?;
            project(g, y, 4)
        }), vec![t(&[5])]),
        ("matmul", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.matmul(p[0], p[1])?;
            project(g, y, 5)
        }), vec![t(&[3, 4]), t(&[4, 2])]),
        ("conv2d", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.conv2d(p[0], p[1], Some(p[2]))?;
            project(g, y, 6)
        }), vec![t(&[2, 2, 4, 4]), t(&[3, 2, 3, 3]), t(&[3])]),
        ("group_norm", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.group_norm(p[0], p[1], p[2], 2)?;
            project(g, y, 7)
        }), vec![t(&[2, 4, 2, 2]), gamma, t(&[4])]),
        ("silu", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.silu(p[0])?;
            project(g, y, 8)
        }), vec![t(&[7])]),
        ("softmax", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.softmax(p[0])?;
            project(g, y, 9)
        }), vec![t(&[2, 3])]),
        ("log_softmax", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.log_softmax(p[0])?;
            project(g, y, 10)
        }), vec![t(&[2, 3])]),
        ("mean", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let sq = g.mul(p[0], p[0])?;
            g.mean(sq)
        }), vec![t(&[2, 3])]),
        ("sum", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let sq = g.mul(p[0], p[0])?;
            g.sum(sq)
        }), vec![t(&[2, 3])]),
        ("reshape", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.reshape(p[0], vec![3, 2])?;
            project(g, y, 11)
        }), vec![t(&[2, 3])]),
        ("concat_channels", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.concat_channels(p[0], p[1])?;
            project(g, y, 12)
        }), vec![t(&[2, 1, 2, 2]), t(&[2, 3, 2, 2])]),
        ("broadcast", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.broadcast(p[0], vec![2, 3, 2, 2])?;
            project(g, y, 13)
        }), vec![t(&[2, 3, 1, 1])]),
        ("avg_pool2", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.avg_pool2(p[0])?;
            project(g, y, 14)
        }), vec![t(&[2, 2, 4, 4])]),
        ("upsample2", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.upsample2(p[0])?;
            project(g, y, 15)
        }), vec![t(&[2, 2, 2, 2])]),
        ("global_avg_pool", Box::new(|g: &mut Graph<f64>, p: &[Var]| {
            let y = g.global_avg_pool(p[0])?;
            project(g, y, 16)
        }), vec![t(&[2, 3, 2, 2])]),
    ]
}

/// Small denoiser with random heads so every path carries gradient.
pub fn grad_check_denoiser_config() -> DenoiserConfig {
    DenoiserConfig {
        image_side: 4,
        base_width: 4,
        depth: 1,
        time_dim: 4,
        categories: 2,
        norm_groups: 2,
    }
}

/// Worst relative error over the full loss graph (sampled coordinates).
pub fn denoiser_grad_check() -> Result<jointdiff::autograd::GradCheckReport> {
    let cfg = grad_check_denoiser_config();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params: Params<f64> = init_params(&cfg, HeadInit::Random, &mut rng)?;
    let b = 2;
    let px = cfg.pixels();
    let batch = TrainingBatch {
        input: DenoiserInput {
            images: (0..b * px).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ages: vec![0.3, -0.6],
            classes: vec![0, 1],
            steps: vec![17, 640],
        },
        eps_image: (0..b * px).map(|_| rng.random_range(-1.0..1.0)).collect(),
        eps_age: vec![0.4, -1.1],
        clean_classes: vec![1, 0],
    };
    let tensors: Vec<Tensor<f64>> = params.tensors().to_vec();
    grad_check(
        |g, vars| {
            let bound = params.bind_vars(vars)?;
            Ok(joint_loss(g, &bound, &cfg, &batch, 1.0)?.total)
        },
        &tensors,
        GRAD_TOLERANCE,
        GradCheckOptions {
            coords_per_param: Some(8),
            seed: 3,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (name, build, inputs) in primitive_cases() {
        let label = format!("grad-{name}");
        out.push(match grad_check(build, &inputs, GRAD_TOLERANCE, GradCheckOptions::default()) {
            Ok(r) => CheckResult::new(&label, r.passed(), format!("max rel error {:.2e} over {}", r.max_rel_error, r.checked)),
            Err(e) => fail(&label, e),
        });
    }
    out.push(match denoiser_grad_check() {
        Ok(r) => CheckResult::new(
            "grad-denoiser-loss",
            r.passed(),
            format!("max rel error {:.2e} over {}", r.max_rel_error, r.checked),
        ),
        Err(e) => fail("grad-denoiser-loss", e),
    });
    out
}

pub fn run_all() -> Vec<CheckResult> {
    let mut out = vec![schedule_algebra(), d3pm_brute_force()];
    out.extend(grad_checks());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_marginal_matches_cumulative() {
        let s = &brute_force_schedules().unwrap()[7];
        for x0 in 0..3 {
            for z in 0..3 {
                let total: f64 = enumerate_joint(s, x0, 4, 2, z).unwrap().iter().sum();
                let want = s.cumulative_transition(4).unwrap().get(x0, z);
                assert!((total - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn suite_passes() {
        for r in run_all() {
            assert!(r.passed, "{}", r.line());
        }
    }
}
