//! Adam training loop with per-epoch validation and best-epoch selection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::{encode_record, forward_diffuse, joint_loss, AgeRange, JointState, Schedules, TrainingBatch};
use crate::autograd::Graph;
use crate::denoiser::{init_params, DenoiserConfig, HeadInit, Params};
use crate::error::{invalid, Error, Result};
use crate::schedule::{DiscreteScheduleSpec, GaussianScheduleSpec};
use crate::synthdata::{Dataset, Split};

/// Learning-rate multiplier over the course of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero at the last step.
    Cosine,
}

impl LrSchedule {
    /// Rate for 1-based `step` out of `total`.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let progress = (step - 1) as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub denoiser: DenoiserConfig,
    pub gaussian: GaussianScheduleSpec,
    pub discrete: DiscreteScheduleSpec,
    pub age_range: AgeRange,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_image: f64,
    /// Noised copies of each validation record, drawn once and reused every epoch.
    pub validation_draws: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            gaussian: GaussianScheduleSpec::default(),
            discrete: DiscreteScheduleSpec::default(),
            age_range: AgeRange::default(),
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_image: 1.0,
            validation_draws: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.age_range.validate()?;
        if self.discrete.categories != self.denoiser.categories {
            return Err(invalid("schedule and denoiser disagree on the category count"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.validation_draws == 0 {
            return Err(invalid("epochs, batch size and validation draws must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.lambda_image >= 0.0) {
            return Err(invalid("need adam_eps > 0 and lambda_image >= 0"));
        }
        Ok(())
    }
}

/// Batch-averaged loss and its three terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub image: f64,
    pub age: f64,
    pub sex: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.total += weight * other.total;
        self.image += weight * other.image;
        self.age += weight * other.age;
        self.sex += weight * other.sex;
    }

    fn scaled(mut self, c: f64) -> Self {
        self.total *= c;
        self.image *= c;
        self.age *= c;
        self.sex *= c;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub initial_validation: LossBreakdown,
    pub history: Vec<EpochLog>,
}

// Independent random streams, one per purpose.
const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_STEPS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_VALIDATION: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &Params<f32>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut Params<f32>, grads: &[Vec<f32>], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grads[i][j] as f64;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let step = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
                *p = (*p as f64 - step) as f32;
            }
        }
    }
}

fn loss_values(g: &Graph<f32>, l: &super::LossVars) -> LossBreakdown {
    let v = |x| g.value(x).data()[0] as f64;
    LossBreakdown {
        total: v(l.total),
        image: v(l.image),
        age: v(l.age),
        sex: v(l.sex),
    }
}

fn evaluate(
    params: &Params<f32>,
    cfg: &TrainConfig,
    items: &[(super::Diffused, usize)],
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for chunk in items.chunks(cfg.batch_size.max(64)) {
        let batch = TrainingBatch::from_diffused(chunk);
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let l = joint_loss(&mut g, &bound, &cfg.denoiser, &batch, cfg.lambda_image)?;
        acc.accumulate(&loss_values(&g, &l), chunk.len() as f64);
    }
    Ok(acc.scaled(1.0 / items.len() as f64))
}

fn encoded(dataset: &Dataset, split: Split, cfg: &TrainConfig) -> Result<Vec<(JointState, usize)>> {
    let k = cfg.denoiser.categories;
    dataset
        .records_in(split)
        .map(|r| {
            r.record.validate(cfg.denoiser.pixels(), &cfg.age_range, k)?;
            Ok((encode_record(&r.record, &cfg.age_range, k)?, r.record.sex))
        })
        .collect()
}

/// Trains from scratch on the train split and selects the epoch with the
/// lowest loss on a fixed noised copy of the validation split. `progress`
/// is called after every epoch.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, mut progress: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scheds = Schedules::from_specs(&cfg.gaussian, &cfg.discrete)?;
    let t_max = scheds.steps();
    let train_set = encoded(dataset, Split::Train, cfg)?;
    let val_set = encoded(dataset, Split::Validation, cfg)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid("training needs non-empty train and validation splits"));
    }

    let mut val_rng = stream(cfg.seed, STREAM_VALIDATION);
    let mut val_items = Vec::with_capacity(val_set.len() * cfg.validation_draws);
    for (z0, clean) in &val_set {
        for _ in 0..cfg.validation_draws {
            let t = val_rng.random_range(1..=t_max);
            val_items.push((forward_diffuse(z0, t, &scheds, &mut val_rng)?, *clean));
        }
    }

    let mut params: Params<f32> = init_params(&cfg.denoiser, HeadInit::Zero, &mut stream(cfg.seed, STREAM_INIT))?;
    let mut adam = Adam::new(&params);
    let mut order_rng = stream(cfg.seed, STREAM_ORDER);
    let mut step_rng = stream(cfg.seed, STREAM_STEPS);
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);

    let initial = evaluate(&params, cfg, &val_items)?;
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut global_step = 0usize;
    let total_steps = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut train_loss = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            global_step += 1;
            let mut items = Vec::with_capacity(idx.len());
            for &i in idx {
                let t = step_rng.random_range(1..=t_max);
                items.push((forward_diffuse(&train_set[i].0, t, &scheds, &mut noise_rng)?, train_set[i].1));
            }
            let batch = TrainingBatch::from_diffused(&items);
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let l = joint_loss(&mut g, &bound, &cfg.denoiser, &batch, cfg.lambda_image)?;
            let values = loss_values(&g, &l);
            if !values.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: global_step,
                    loss: values.total,
                });
            }
            let grads = g.backward(l.total)?;
            let grads: Vec<Vec<f32>> = bound.vars().iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
            let lr = cfg.lr_schedule.rate(cfg.learning_rate, global_step, total_steps);
            adam.update(&mut params, &grads, lr, cfg);
            train_loss.accumulate(&values, idx.len() as f64);
        }
        let validation = evaluate(&params, cfg, &val_items)?;
        if !validation.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: global_step,
                loss: validation.total,
            });
        }
        let log = EpochLog {
            epoch,
            train: train_loss.scaled(1.0 / train_set.len() as f64),
            validation,
        };
        if validation.total < best.0 {
            best = (validation.total, epoch, params.clone());
        }
        progress(&log);
        history.push(log);
    }

    let (validation_loss, epoch, best_params) = best;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            header: CheckpointHeader {
                gaussian: cfg.gaussian,
                discrete: cfg.discrete,
                denoiser: cfg.denoiser,
                age_range: cfg.age_range,
                epoch,
                validation_loss,
                initial_validation_loss: initial.total,
                validation_history: history.iter().map(|h| h.validation.total).collect(),
                seed: cfg.seed,
            },
            params: best_params,
        },
        initial_validation: initial,
        history,
    })
}
