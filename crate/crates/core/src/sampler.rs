//! Joint reverse sampling with per-step overwriting of known components.
//!
//! Trajectories are independent: each one owns a random stream derived from
//! its seed, so results never depend on how trajectories are batched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::categorical::{d3pm_sample, d3pm_step, FinalDecode, OneHot};
use crate::denoiser::{predict, DenoiserConfig, DenoiserInput, Params};
use crate::error::{invalid, Error, Result};
use crate::gaussian::{ddim_step, q_sample};
use crate::joint::{AgeRange, Checkpoint, JointState, PatientRecord, Schedules};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub continuous_steps: usize,
    pub discrete_steps: usize,
    pub inference_samples: usize,
    pub final_decode: FinalDecode,
    /// Trajectories per network forward pass.
    pub batch_size: usize,
    /// Passes per step with re-noise and repeat; only a single pass is
    /// supported.
    pub resample_loops: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            continuous_steps: 50,
            discrete_steps: 20,
            inference_samples: 3,
            final_decode: FinalDecode::Argmax,
            batch_size: 64,
            resample_loops: 1,
        }
    }
}

/// Decreasing step grids from `T` to 0. The discrete grid is a subset of the
/// continuous one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub continuous: Vec<usize>,
    pub discrete: Vec<usize>,
}

impl SamplerPlan {
    pub fn continuous_updates(&self) -> usize {
        self.continuous.len() - 1
    }

    pub fn discrete_updates(&self) -> usize {
        self.discrete.len() - 1
    }

    /// Target of the categorical jump taken at continuous step `t`, if any.
    fn discrete_target(&self, t: usize) -> Option<usize> {
        let i = self.discrete.iter().position(|&d| d == t)?;
        self.discrete.get(i + 1).copied()
    }
}

/// Continuous grid `round(T (n - i) / n)`, `i = 0..=n`; discrete grid takes the
/// continuous points at indices `round(j n / k)`, `j = 0..=k`.
pub fn build_plan(steps: usize, continuous: usize, discrete: usize) -> Result<SamplerPlan> {
    if !(1 <= discrete && discrete <= continuous && continuous <= steps) {
        return Err(invalid(format!(
            "need 1 <= discrete ({discrete}) <= continuous ({continuous}) <= T ({steps})"
        )));
    }
    let n = continuous as f64;
    let cont: Vec<usize> = (0..=continuous)
        .map(|i| (steps as f64 * (n - i as f64) / n).round() as usize)
        .collect();
    let disc = (0..=discrete)
        .map(|j| cont[(j as f64 * n / discrete as f64).round() as usize])
        .collect();
    Ok(SamplerPlan {
        continuous: cont,
        discrete: disc,
    })
}

/// Which components are fixed, and their values in natural units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conditioning {
    /// Per-pixel known flag and the full value grid (unknown entries ignored).
    pub image: Option<(Vec<bool>, Vec<f32>)>,
    pub age: Option<f64>,
    pub sex: Option<usize>,
}

impl Conditioning {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_image(mut self, image: &[f32]) -> Self {
        self.image = Some((vec![true; image.len()], image.to_vec()));
        self
    }

    pub fn with_image_mask(mut self, mask: Vec<bool>, image: &[f32]) -> Self {
        self.image = Some((mask, image.to_vec()));
        self
    }

    pub fn with_age(mut self, age: f64) -> Self {
        self.age = Some(age);
        self
    }

    pub fn with_sex(mut self, sex: usize) -> Self {
        self.sex = Some(sex);
        self
    }

    /// Known image on the left half (`x < side / 2`) only.
    pub fn left_half(image: &[f32], side: usize) -> Self {
        let mask = (0..side * side).map(|i| i % side < side / 2).collect();
        Self::none().with_image_mask(mask, image)
    }

    pub fn validate(&self, pixels: usize, range: &AgeRange, categories: usize) -> Result<()> {
        if let Some((mask, values)) = &self.image {
            if mask.len() != pixels || values.len() != pixels {
                return Err(Error::ShapeMismatch {
                    expected: vec![pixels],
                    actual: vec![mask.len(), values.len()],
                });
            }
            if mask.iter().zip(values).any(|(&m, v)| m && !(-1.0..=1.0).contains(v)) {
                return Err(invalid("known pixels must lie in [-1, 1]"));
            }
        }
        if let Some(age) = self.age {
            if !range.contains(age) {
                return Err(invalid(format!("known age {age} outside [{}, {}]", range.lo, range.hi)));
            }
        }
        if let Some(s) = self.sex {
            if s >= categories {
                return Err(invalid(format!("known sex {s} out of range for K = {categories}")));
            }
        }
        Ok(())
    }
}

/// One trajectory request.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub condition: Conditioning,
    pub seed: u64,
}

/// Decoded output plus the final encoded state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record: PatientRecord,
    pub state: JointState,
}

/// Known components in encoded space.
struct Known {
    image: Option<(Vec<bool>, Vec<f64>)>,
    age: Option<f64>,
    sex: Option<OneHot>,
}

struct Trajectory {
    state: JointState,
    known: Known,
    rng: ChaCha8Rng,
}

impl Trajectory {
    /// Overwrites known components with their forward-noised values at `t`,
    /// or their clean values at `t = 0`. Random draws happen only for known
    /// components.
    fn overwrite(&mut self, t: usize, scheds: &Schedules) -> Result<()> {
        if let Some((mask, values)) = &self.known.image {
            let eps: Vec<f64> = if t == 0 {
                vec![0.0; values.len()]
            } else {
                mask.iter()
                    .map(|&m| if m { StandardNormal.sample(&mut self.rng) } else { 0.0 })
                    .collect()
            };
            let noised = q_sample(values, t, &eps, &scheds.gaussian)?;
            for ((dst, &m), (&v, n)) in self.state.image.iter_mut().zip(mask).zip(values.iter().zip(noised)) {
                if m {
                    *dst = if t == 0 { v } else { n };
                }
            }
        }
        if let Some(a) = self.known.age {
            self.state.age = if t == 0 {
                a
            } else {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                q_sample(&[a], t, &[e], &scheds.gaussian)?[0]
            };
        }
        if let Some(s) = &self.known.sex {
            self.state.sex = if t == 0 {
                s.clone()
            } else {
                d3pm_sample(s, t, &scheds.discrete, &mut self.rng)?
            };
        }
        self.state.t = t;
        Ok(())
    }
}

/// SplitMix64 mix of a base seed and an index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampling front-end over a loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    params: &'a Params<f32>,
    denoiser: DenoiserConfig,
    age_range: AgeRange,
    scheds: Schedules,
    plan: SamplerPlan,
    config: SamplerConfig,
}

/// Age estimate from repeated conditional samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeEstimate {
    pub estimate: f64,
    pub samples: Vec<f64>,
    /// Unbiased sample variance (0 for a single sample).
    pub variance: f64,
}

/// Majority vote over repeated conditional samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SexPrediction {
    pub class: usize,
    /// Vote count per category.
    pub votes: Vec<usize>,
}

/// Arithmetic mean and unbiased variance.
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Most-voted category; ties go to the lowest index.
pub fn majority_vote(samples: &[usize], categories: usize) -> Result<SexPrediction> {
    if samples.is_empty() {
        return Err(invalid("no votes"));
    }
    let mut votes = vec![0usize; categories];
    for &s in samples {
        if s >= categories {
            return Err(invalid(format!("vote {s} out of range")));
        }
        votes[s] += 1;
    }
    let best = *votes.iter().max().unwrap();
    let class = votes.iter().position(|&v| v == best).unwrap();
    Ok(SexPrediction { class, votes })
}

impl<'a> Sampler<'a> {
    pub fn new(checkpoint: &'a Checkpoint, config: SamplerConfig) -> Result<Self> {
        let scheds = checkpoint.schedules()?;
        let plan = build_plan(scheds.steps(), config.continuous_steps, config.discrete_steps)?;
        if config.inference_samples == 0 || config.batch_size == 0 {
            return Err(invalid("inference samples and batch size must be positive"));
        }
        if config.resample_loops != 1 {
            return Err(invalid("resample_loops must be 1"));
        }
        let h = &checkpoint.header;
        h.denoiser.validate()?;
        Ok(Self {
            params: &checkpoint.params,
            denoiser: h.denoiser,
            age_range: h.age_range,
            scheds,
            plan,
            config,
        })
    }

    pub fn plan(&self) -> &SamplerPlan {
        &self.plan
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn age_range(&self) -> &AgeRange {
        &self.age_range
    }

    pub fn denoiser(&self) -> &DenoiserConfig {
        &self.denoiser
    }

    fn start(&self, job: &Job) -> Result<Trajectory> {
        let k = self.denoiser.categories;
        let px = self.denoiser.pixels();
        job.condition.validate(px, &self.age_range, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
        let image = (0..px).map(|_| StandardNormal.sample(&mut rng)).collect();
        let age = StandardNormal.sample(&mut rng);
        let sex = OneHot::hard(k, rng.random_range(0..k))?;
        let c = &job.condition;
        let known = Known {
            image: c
                .image
                .as_ref()
                .map(|(m, v)| (m.clone(), v.iter().map(|&x| x as f64).collect())),
            age: c.age.map(|a| self.age_range.encode(a)),
            sex: c.sex.map(|s| OneHot::hard(k, s)).transpose()?,
        };
        let t_max = self.scheds.steps();
        let mut traj = Trajectory {
            state: JointState {
                image,
                age,
                sex,
                t: t_max,
            },
            known,
            rng,
        };
        traj.overwrite(t_max, &self.scheds)?;
        Ok(traj)
    }

    fn finish(&self, traj: Trajectory, job: &Job) -> Sample {
        let mut record = crate::joint::decode_state(&traj.state, &self.age_range);
        // Known ages are returned in the caller's units exactly.
        if let Some(a) = job.condition.age {
            record.age = a;
        }
        Sample {
            record,
            state: traj.state,
        }
    }

    /// Runs every job to `t = 0`.
    pub fn sample(&self, jobs: &[Job]) -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(self.config.batch_size) {
            let mut trajs = chunk.iter().map(|j| self.start(j)).collect::<Result<Vec<_>>>()?;
            self.run(&mut trajs)?;
            out.extend(trajs.into_iter().zip(chunk).map(|(t, j)| self.finish(t, j)));
        }
        Ok(out)
    }

    fn run(&self, trajs: &mut [Trajectory]) -> Result<()> {
        let k = self.denoiser.categories;
        let g = &self.scheds.gaussian;
        for w in self.plan.continuous.windows(2) {
            let (t, t_prev) = (w[0], w[1]);
            let input = DenoiserInput {
                images: trajs.iter().flat_map(|tr| tr.state.image.iter().copied()).collect(),
                ages: trajs.iter().map(|tr| tr.state.age).collect(),
                classes: trajs.iter().map(|tr| tr.state.sex.argmax()).collect(),
                steps: vec![t; trajs.len()],
            };
            let preds = predict(self.params, &self.denoiser, &input)?;
            let jump = self.plan.discrete_target(t);
            for (tr, p) in trajs.iter_mut().zip(preds) {
                let s = &mut tr.state;
                s.image = ddim_step(&s.image, &p.eps_image, t, t_prev, g)?;
                s.age = ddim_step(&[s.age], &[p.eps_age], t, t_prev, g)?[0];
                if let Some(to) = jump {
                    s.sex = d3pm_step(
                        &s.sex,
                        &p.sex_logits,
                        t,
                        to,
                        &self.scheds.discrete,
                        self.config.final_decode,
                        &mut tr.rng,
                    )?;
                }
                if !s.age.is_finite() || s.image.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("sampler state at step {t} -> {t_prev}")));
                }
                debug_assert_eq!(s.sex.categories(), k);
                tr.overwrite(t_prev, &self.scheds)?;
            }
        }
        Ok(())
    }

    pub fn sample_unconditional(&self, seed: u64) -> Result<Sample> {
        self.sample_conditional(&Conditioning::none(), seed)
    }

    pub fn sample_conditional(&self, condition: &Conditioning, seed: u64) -> Result<Sample> {
        let job = Job {
            condition: condition.clone(),
            seed,
        };
        Ok(self.sample(std::slice::from_ref(&job))?.remove(0))
    }

    fn repeated(&self, conditions: &[Conditioning], seed: u64) -> Result<Vec<Vec<Sample>>> {
        let n = self.config.inference_samples;
        let jobs: Vec<Job> = conditions
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                (0..n).map(move |r| Job {
                    condition: c.clone(),
                    seed: derive_seed(seed, (i * n + r) as u64),
                })
            })
            .collect();
        let mut samples = self.sample(&jobs)?.into_iter();
        Ok((0..conditions.len()).map(|_| samples.by_ref().take(n).collect()).collect())
    }

    /// Age estimates for many queries at once: the mean of the configured
    /// number of conditional samples, each query with the given conditions.
    pub fn estimate_ages(&self, conditions: &[Conditioning], seed: u64) -> Result<Vec<AgeEstimate>> {
        if conditions.iter().any(|c| c.age.is_some()) {
            return Err(invalid("age must be unknown when estimating it"));
        }
        Ok(self
            .repeated(conditions, seed)?
            .into_iter()
            .map(|ss| {
                let ages: Vec<f64> = ss.iter().map(|s| s.record.age).collect();
                let (estimate, variance) = mean_and_variance(&ages);
                AgeEstimate {
                    estimate,
                    samples: ages,
                    variance,
                }
            })
            .collect())
    }

    pub fn estimate_age(&self, image: Option<&[f32]>, sex: Option<usize>, seed: u64) -> Result<AgeEstimate> {
        let mut c = Conditioning::none();
        c.image = image.map(|i| (vec![true; i.len()], i.to_vec()));
        c.sex = sex;
        Ok(self.estimate_ages(&[c], seed)?.remove(0))
    }

    pub fn predict_sexes(&self, conditions: &[Conditioning], seed: u64) -> Result<Vec<SexPrediction>> {
        if conditions.iter().any(|c| c.sex.is_some()) {
            return Err(invalid("sex must be unknown when predicting it"));
        }
        self.repeated(conditions, seed)?
            .into_iter()
            .map(|ss| {
                let votes: Vec<usize> = ss.iter().map(|s| s.record.sex).collect();
                majority_vote(&votes, self.denoiser.categories)
            })
            .collect()
    }

    pub fn predict_sex(&self, image: &[f32], age: Option<f64>, seed: u64) -> Result<SexPrediction> {
        let mut c = Conditioning::none().with_image(image);
        c.age = age;
        Ok(self.predict_sexes(&[c], seed)?.remove(0))
    }

    /// Completes the right half of `image` given its left half.
    pub fn inpaint_left_half(&self, image: &[f32], seed: u64) -> Result<Sample> {
        self.sample_conditional(&Conditioning::left_half(image, self.denoiser.image_side), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_counts() {
        let p = build_plan(1000, 50, 20).unwrap();
        assert_eq!(p.continuous_updates(), 50);
        assert_eq!(p.discrete_updates(), 20);
        assert_eq!(p.continuous[0], 1000);
        assert_eq!(*p.continuous.last().unwrap(), 0);
        assert_eq!(*p.discrete.last().unwrap(), 0);
        assert!(p.discrete.iter().all(|d| p.continuous.contains(d)));
        assert!(p.continuous.windows(2).all(|w| w[0] > w[1]));
        assert!(p.discrete.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn full_resolution_and_equal_counts() {
        let p = build_plan(10, 10, 10).unwrap();
        assert_eq!(p.continuous, (0..=10).rev().collect::<Vec<_>>());
        assert_eq!(p.discrete, p.continuous);
        let p = build_plan(1000, 50, 50).unwrap();
        assert_eq!(p.discrete, p.continuous);
        assert!(build_plan(10, 11, 5).is_err());
        assert!(build_plan(1000, 20, 50).is_err());
        assert!(build_plan(1000, 50, 0).is_err());
    }

    #[test]
    fn votes() {
        assert_eq!(majority_vote(&[1, 1, 0], 2).unwrap().class, 1);
        assert_eq!(majority_vote(&[0, 0, 0], 2).unwrap().class, 0);
        assert_eq!(majority_vote(&[0, 0, 0], 2).unwrap().votes, vec![3, 0]);
        assert_eq!(majority_vote(&[2, 1], 3).unwrap().class, 1);
        assert!(majority_vote(&[], 2).is_err());
    }

    #[test]
    fn sample_variance_is_unbiased() {
        let (m, v) = mean_and_variance(&[1.0, 2.0, 6.0]);
        assert_eq!(m, 3.0);
        assert_eq!(v, 7.0);
        assert_eq!(mean_and_variance(&[4.0]).1, 0.0);
    }

    #[test]
    fn seeds_are_distinct() {
        let s: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
