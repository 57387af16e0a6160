//! The joint state over (image, age, sex): encoding, the shared-step forward
//! process, the combined training objective and the training loop.

mod checkpoint;
mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, EpochLog, LossBreakdown, LrSchedule, TrainConfig, TrainOutcome};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::categorical::{d3pm_sample, OneHot};
use crate::denoiser::{forward, BoundParams, DenoiserConfig, DenoiserInput};
use crate::error::{invalid, Error, Result};
use crate::gaussian::q_sample;
use crate::schedule::{
    DiscreteSchedule, DiscreteScheduleSpec, GaussianSchedule, GaussianScheduleSpec,
};
use crate::tensor::{Real, Tensor};

/// Closed interval of ages mapped onto [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgeRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for AgeRange {
    fn default() -> Self {
        Self { lo: 20.0, hi: 90.0 }
    }
}

impl AgeRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(invalid(format!("age range [{}, {}] is empty", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn encode(&self, age: f64) -> f64 {
        2.0 * (age - self.lo) / (self.hi - self.lo) - 1.0
    }

    pub fn decode(&self, z: f64) -> f64 {
        self.lo + (z + 1.0) * 0.5 * (self.hi - self.lo)
    }

    pub fn contains(&self, age: f64) -> bool {
        age >= self.lo && age <= self.hi
    }
}

/// One subject: image grid in [-1, 1], age in years, sex category.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub image: Vec<f32>,
    pub age: f64,
    pub sex: usize,
}

impl PatientRecord {
    pub fn validate(&self, pixels: usize, range: &AgeRange, categories: usize) -> Result<()> {
        if self.image.len() != pixels {
            return Err(Error::ShapeMismatch {
                expected: vec![pixels],
                actual: vec![self.image.len()],
            });
        }
        if self.image.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(invalid("image entries must lie in [-1, 1]"));
        }
        if !range.contains(self.age) {
            return Err(invalid(format!(
                "age {} outside [{}, {}]",
                self.age, range.lo, range.hi
            )));
        }
        if self.sex >= categories {
            return Err(invalid(format!("sex {} out of range for K = {categories}", self.sex)));
        }
        Ok(())
    }
}

/// The diffusing tuple; all components share the step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub image: Vec<f64>,
    pub age: f64,
    pub sex: OneHot,
    pub t: usize,
}

pub fn encode_record(r: &PatientRecord, range: &AgeRange, categories: usize) -> Result<JointState> {
    range.validate()?;
    if !range.contains(r.age) {
        return Err(invalid(format!("age {} outside [{}, {}]", r.age, range.lo, range.hi)));
    }
    Ok(JointState {
        image: r.image.iter().map(|&v| v as f64).collect(),
        age: range.encode(r.age),
        sex: OneHot::hard(categories, r.sex)?,
        t: 0,
    })
}

/// Inverse of [`encode_record`]; the image and the encoded age are clamped
/// to [-1, 1] and the category is the argmax.
pub fn decode_state(z: &JointState, range: &AgeRange) -> PatientRecord {
    PatientRecord {
        image: z.image.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect(),
        age: range.decode(z.age.clamp(-1.0, 1.0)),
        sex: z.sex.argmax(),
    }
}

/// Both schedules, validated to share one step count.
#[derive(Debug, Clone)]
pub struct Schedules {
    pub gaussian: GaussianSchedule,
    pub discrete: DiscreteSchedule,
}

impl Schedules {
    pub fn from_specs(g: &GaussianScheduleSpec, d: &DiscreteScheduleSpec) -> Result<Self> {
        if g.steps != d.steps {
            return Err(invalid(format!(
                "gaussian ({}) and categorical ({}) step counts differ",
                g.steps, d.steps
            )));
        }
        Ok(Self {
            gaussian: g.build()?,
            discrete: d.build()?,
        })
    }

    pub fn steps(&self) -> usize {
        self.gaussian.steps()
    }
}

/// A noised state plus the Gaussian draws that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffused {
    pub state: JointState,
    pub eps_image: Vec<f64>,
    pub eps_age: f64,
}

/// Noises every component of a clean state to the same step `t`.
pub fn forward_diffuse<R: Rng + ?Sized>(
    z0: &JointState,
    t: usize,
    scheds: &Schedules,
    rng: &mut R,
) -> Result<Diffused> {
    if t == 0 || t > scheds.steps() {
        return Err(Error::StepOutOfRange {
            t,
            lo: 1,
            hi: scheds.steps(),
        });
    }
    let eps_image: Vec<f64> = (0..z0.image.len()).map(|_| StandardNormal.sample(rng)).collect();
    let eps_age: f64 = StandardNormal.sample(rng);
    let image = q_sample(&z0.image, t, &eps_image, &scheds.gaussian)?;
    let age = q_sample(&[z0.age], t, &[eps_age], &scheds.gaussian)?[0];
    let sex = d3pm_sample(&z0.sex, t, &scheds.discrete, rng)?;
    Ok(Diffused {
        state: JointState { image, age, sex, t },
        eps_image,
        eps_age,
    })
}

/// Network inputs and regression/classification targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub input: DenoiserInput,
    pub eps_image: Vec<f64>,
    pub eps_age: Vec<f64>,
    pub clean_classes: Vec<usize>,
}

impl TrainingBatch {
    pub fn from_diffused(items: &[(Diffused, usize)]) -> Self {
        let mut b = TrainingBatch {
            input: DenoiserInput {
                images: Vec::new(),
                ages: Vec::new(),
                classes: Vec::new(),
                steps: Vec::new(),
            },
            eps_image: Vec::new(),
            eps_age: Vec::new(),
            clean_classes: Vec::new(),
        };
        for (d, clean) in items {
            b.input.images.extend_from_slice(&d.state.image);
            b.input.ages.push(d.state.age);
            b.input.classes.push(d.state.sex.argmax());
            b.input.steps.push(d.state.t);
            b.eps_image.extend_from_slice(&d.eps_image);
            b.eps_age.push(d.eps_age);
            b.clean_classes.push(*clean);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.eps_age.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps_age.is_empty()
    }
}

/// Loss nodes: the total and its three non-negative terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub image: Var,
    pub age: Var,
    pub sex: Var,
}

/// `lambda_I * mean_pixels |eps_I - f_I|^2 + |eps_A - f_A|^2 + CE(s0, softmax f_S)`,
/// each averaged over the batch.
pub fn joint_loss<T: Real>(
    graph: &mut Graph<T>,
    params: &BoundParams,
    cfg: &DenoiserConfig,
    batch: &TrainingBatch,
    lambda_image: f64,
) -> Result<LossVars> {
    let b = batch.len();
    let px = cfg.pixels();
    if batch.eps_image.len() != b * px || batch.clean_classes.len() != b || batch.input.batch() != b {
        return Err(Error::ShapeMismatch {
            expected: vec![b, px],
            actual: vec![batch.eps_image.len(), batch.clean_classes.len()],
        });
    }
    let out = forward(graph, params, cfg, &batch.input)?;
    loss_from_outputs(graph, cfg, batch, out.eps_image, out.eps_age, out.sex_logits, lambda_image)
}

pub(crate) fn loss_from_outputs<T: Real>(
    graph: &mut Graph<T>,
    cfg: &DenoiserConfig,
    batch: &TrainingBatch,
    eps_image: Var,
    eps_age: Var,
    sex_logits: Var,
    lambda_image: f64,
) -> Result<LossVars> {
    let b = batch.len();
    let side = cfg.image_side;
    let k = cfg.categories;
    let cast = |v: &[f64]| v.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>();

    let target_img = graph.constant(Tensor::new(vec![b, 1, side, side], cast(&batch.eps_image))?);
    let d = graph.sub(target_img, eps_image)?;
    let sq = graph.mul(d, d)?;
    let mse_img = graph.mean(sq)?;
    let image = graph.scale(mse_img, T::from_f64_lossy(lambda_image))?;

    let target_age = graph.constant(Tensor::new(vec![b, 1], cast(&batch.eps_age))?);
    let d = graph.sub(target_age, eps_age)?;
    let sq = graph.mul(d, d)?;
    let age = graph.mean(sq)?;

    let mut onehot = vec![T::zero(); b * k];
    for (i, &c) in batch.clean_classes.iter().enumerate() {
        if c >= k {
            return Err(invalid(format!("class {c} out of range")));
        }
        onehot[i * k + c] = T::one();
    }
    let onehot = graph.constant(Tensor::new(vec![b, k], onehot)?);
    let logp = graph.log_softmax(sex_logits)?;
    let picked = graph.mul(logp, onehot)?;
    let s = graph.sum(picked)?;
    let sex = graph.scale(s, T::from_f64_lossy(-1.0 / b as f64))?;

    let partial = graph.add(image, age)?;
    let total = graph.add(partial, sex)?;
    Ok(LossVars {
        total,
        image,
        age,
        sex,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, HeadInit, Params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(age: f64, sex: usize) -> PatientRecord {
        PatientRecord {
            image: vec![0.25; 4],
            age,
            sex,
        }
    }

    #[test]
    fn encode_endpoints() {
        let r = AgeRange::default();
        assert_eq!(encode_record(&record(20.0, 0), &r, 2).unwrap().age, -1.0);
        assert_eq!(encode_record(&record(55.0, 0), &r, 2).unwrap().age, 0.0);
        assert_eq!(encode_record(&record(90.0, 1), &r, 2).unwrap().age, 1.0);
        assert!(encode_record(&record(91.0, 1), &r, 2).is_err());
        assert!(encode_record(&record(19.0, 1), &r, 2).is_err());
    }

    #[test]
    fn decode_cases() {
        let r = AgeRange::default();
        for age in [20.0, 27.0, 55.0, 90.0] {
            let rec = record(age, 1);
            assert_eq!(decode_state(&encode_record(&rec, &r, 2).unwrap(), &r), rec);
        }
        let z = JointState {
            image: vec![1.7, -3.0],
            age: 0.5,
            sex: OneHot::soft(vec![0.4, 0.6]).unwrap(),
            t: 0,
        };
        let d = decode_state(&z, &r);
        assert_eq!(d.age, 72.5);
        assert_eq!(d.sex, 1);
        assert_eq!(d.image, vec![1.0, -1.0]);
    }

    #[test]
    fn mismatched_step_counts_rejected() {
        let g = GaussianScheduleSpec::default();
        let d = DiscreteScheduleSpec {
            steps: 10,
            ..DiscreteScheduleSpec::default()
        };
        assert!(Schedules::from_specs(&g, &d).is_err());
    }

    #[test]
    fn forward_diffuse_identity_chain() {
        let scheds = Schedules {
            gaussian: GaussianSchedule::from_betas(vec![1e-300; 3]).unwrap(),
            discrete: DiscreteSchedule::from_betas(2, vec![0.0; 3]).unwrap(),
        };
        let z0 = encode_record(&record(40.0, 1), &AgeRange::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = forward_diffuse(&z0, 3, &scheds, &mut rng).unwrap();
        assert_eq!(d.state.sex, z0.sex);
        assert!((d.state.age - z0.age).abs() < 1e-12);
        assert!(forward_diffuse(&z0, 0, &scheds, &mut rng).is_err());
        assert!(forward_diffuse(&z0, 4, &scheds, &mut rng).is_err());
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        let cfg = DenoiserConfig {
            image_side: 4,
            base_width: 4,
            depth: 1,
            time_dim: 4,
            categories: 2,
            norm_groups: 2,
        };
        let batch = TrainingBatch {
            input: DenoiserInput {
                images: vec![0.0; 32],
                ages: vec![0.1, 0.2],
                classes: vec![0, 1],
                steps: vec![3, 3],
            },
            eps_image: (0..32).map(|i| (i as f64).sin()).collect(),
            eps_age: vec![0.3, -0.7],
            clean_classes: vec![1, 0],
        };
        let mut g: Graph<f64> = Graph::new();
        let img = g.constant(Tensor::new(vec![2, 1, 4, 4], batch.eps_image.clone()).unwrap());
        let age = g.constant(Tensor::new(vec![2, 1], batch.eps_age.clone()).unwrap());
        let logits = g.constant(Tensor::new(vec![2, 2], vec![-20.0, 20.0, 20.0, -20.0]).unwrap());
        let l = loss_from_outputs(&mut g, &cfg, &batch, img, age, logits, 1.0).unwrap();
        assert!(g.value(l.total).data()[0] < 1e-6);
        assert!(g.value(l.total).data()[0] >= 0.0);

        // zero heads: loss equals the all-zero predictor
        let params: Params<f64> = init_params(&cfg, HeadInit::Zero, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let l = joint_loss(&mut g, &bound, &cfg, &batch, 1.0).unwrap();
        let want_img = batch.eps_image.iter().map(|e| e * e).sum::<f64>() / 32.0;
        let want_age = (0.09 + 0.49) / 2.0;
        let want = want_img + want_age + std::f64::consts::LN_2;
        assert!((g.value(l.total).data()[0] - want).abs() < 1e-12);
    }
}
