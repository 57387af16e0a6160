//! Discrete diffusion over a single categorical variable with uniform
//! transition matrices: forward corruption, the x0-parameterised jump
//! posterior, and the sampling step used by the k-step reverse chain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::schedule::DiscreteSchedule;

const SUM_TOL: f64 = 1e-9;

/// Probability row vector over `K` categories.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHot {
    probs: Vec<f64>,
    hard: bool,
}

impl OneHot {
    pub fn hard(categories: usize, class: usize) -> Result<Self> {
        if class >= categories {
            return Err(invalid(format!("class {class} out of range for K = {categories}")));
        }
        let mut probs = vec![0.0; categories];
        probs[class] = 1.0;
        Ok(Self { probs, hard: true })
    }

    pub fn soft(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(invalid("distribution needs at least two categories"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(invalid(format!("invalid probabilities {probs:?}")));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(invalid(format!("probabilities sum to {s}")));
        }
        let hard = probs.iter().filter(|p| **p == 1.0).count() == 1;
        Ok(Self { probs, hard })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn categories(&self) -> usize {
        self.probs.len()
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    fn require_hard(&self) -> Result<usize> {
        if !self.hard {
            return Err(invalid("expected a hard one-hot state"));
        }
        Ok(self.argmax())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p / total;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws `z_t ~ Cat(z0 Qbar_t)`.
pub fn d3pm_sample<R: Rng + ?Sized>(
    z0: &OneHot,
    t: usize,
    sched: &DiscreteSchedule,
    rng: &mut R,
) -> Result<OneHot> {
    let c = z0.require_hard()?;
    check_k(z0, sched)?;
    let row = sched.cumulative_transition(t)?.row(c);
    OneHot::hard(sched.categories(), sample_categorical(row, rng))
}

fn check_k(z: &OneHot, sched: &DiscreteSchedule) -> Result<()> {
    if z.categories() != sched.categories() {
        return Err(Error::ShapeMismatch {
            expected: vec![sched.categories()],
            actual: vec![z.categories()],
        });
    }
    Ok(())
}

/// `p(z_{t_prev} | z_t) = sum_x0 q(z_{t_prev} | z_t, x0) p(x0)`.
///
/// For each clean class with non-zero weight the per-class posterior is
/// `[Q_{t_prev -> t}]_{j, z_t} [x0 Qbar_{t_prev}]_j`, normalised over `j`.
/// Classes whose posterior normaliser is zero (they cannot reach `z_t`) are
/// dropped and the remaining mixture weights renormalised.
pub fn d3pm_posterior(
    z_t: &OneHot,
    x0_probs: &OneHot,
    t: usize,
    t_prev: usize,
    sched: &DiscreteSchedule,
) -> Result<OneHot> {
    if t_prev >= t {
        return Err(invalid(format!("posterior jump {t} -> {t_prev} must decrease")));
    }
    let zc = z_t.require_hard()?;
    check_k(z_t, sched)?;
    check_k(x0_probs, sched)?;
    let k = sched.categories();
    let jump = sched.transition_between(t_prev, t)?;
    let prior = sched.cumulative_transition(t_prev)?;
    let likelihood: Vec<f64> = (0..k).map(|j| jump.get(j, zc)).collect();

    let mut out = vec![0.0; k];
    let mut weight = 0.0;
    for (c, &w) in x0_probs.probs().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let unnorm: Vec<f64> = (0..k).map(|j| likelihood[j] * prior.get(c, j)).collect();
        let norm: f64 = unnorm.iter().sum();
        if norm <= 0.0 {
            continue;
        }
        weight += w;
        for (o, u) in out.iter_mut().zip(&unnorm) {
            *o += w * u / norm;
        }
    }
    if weight <= 0.0 {
        return Err(invalid(format!(
            "posterior normaliser is zero for z_t = {zc} at {t} -> {t_prev}"
        )));
    }
    for o in &mut out {
        *o /= weight;
    }
    // Absorb the last ulp so the result passes the simplex check exactly.
    let s: f64 = out.iter().sum();
    for o in &mut out {
        *o /= s;
    }
    let hard = out.iter().filter(|p| **p == 1.0).count() == 1;
    Ok(OneHot { probs: out, hard })
}

/// How the final (`t_prev = 0`) categorical value is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalDecode {
    #[default]
    Argmax,
    Sample,
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("logits {logits:?}")));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// One reverse jump `t -> t_prev` driven by predicted clean-class logits.
pub fn d3pm_step<R: Rng + ?Sized>(
    z_t: &OneHot,
    logits: &[f64],
    t: usize,
    t_prev: usize,
    sched: &DiscreteSchedule,
    decode: FinalDecode,
    rng: &mut R,
) -> Result<OneHot> {
    let x0 = OneHot::soft(softmax(logits)?)?;
    let post = d3pm_posterior(z_t, &x0, t, t_prev, sched)?;
    let class = if t_prev == 0 && decode == FinalDecode::Argmax {
        post.argmax()
    } else {
        sample_categorical(post.probs(), rng)
    };
    OneHot::hard(sched.categories(), class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::cosine_discrete_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn onehot_validation() {
        assert!(OneHot::hard(2, 2).is_err());
        assert!(OneHot::soft(vec![0.5, 0.6]).is_err());
        assert!(OneHot::soft(vec![-0.1, 1.1]).is_err());
        let s = OneHot::soft(vec![0.4, 0.6]).unwrap();
        assert!(!s.is_hard());
        assert_eq!(s.argmax(), 1);
        assert!(OneHot::soft(vec![0.0, 1.0]).unwrap().is_hard());
        assert_eq!(OneHot::soft(vec![0.5, 0.5]).unwrap().argmax(), 0);
    }

    #[test]
    fn sample_at_zero_is_identity() {
        let s = cosine_discrete_schedule(50, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = OneHot::hard(3, 2).unwrap();
        for _ in 0..100 {
            assert_eq!(d3pm_sample(&z0, 0, &s, &mut rng).unwrap(), z0);
        }
        assert!(d3pm_sample(&z0, 51, &s, &mut rng).is_err());
    }

    #[test]
    fn posterior_to_zero_returns_hard_x0() {
        let s = cosine_discrete_schedule(10, 3).unwrap();
        let zt = OneHot::hard(3, 0).unwrap();
        let x0 = OneHot::hard(3, 2).unwrap();
        let p = d3pm_posterior(&zt, &x0, 7, 0, &s).unwrap();
        assert_eq!(p.probs(), x0.probs());
    }

    #[test]
    fn identity_chain_returns_z_t() {
        let s = DiscreteSchedule::from_betas(3, vec![0.0; 5]).unwrap();
        let zt = OneHot::hard(3, 1).unwrap();
        let x0 = OneHot::soft(vec![0.2, 0.5, 0.3]).unwrap();
        let p = d3pm_posterior(&zt, &x0, 5, 2, &s).unwrap();
        assert_eq!(p.probs(), zt.probs());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = d3pm_step(&zt, &[0.0, 0.0, 0.0], 5, 2, &s, FinalDecode::Argmax, &mut rng).unwrap();
        assert_eq!(z, zt);
    }

    #[test]
    fn impossible_posterior_is_an_error() {
        let s = DiscreteSchedule::from_betas(2, vec![0.0; 3]).unwrap();
        let zt = OneHot::hard(2, 1).unwrap();
        let x0 = OneHot::hard(2, 0).unwrap();
        assert!(d3pm_posterior(&zt, &x0, 3, 1, &s).is_err());
    }

    #[test]
    fn saturated_logits_decode_to_their_class() {
        let s = cosine_discrete_schedule(100, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for zc in 0..3 {
            let zt = OneHot::hard(3, zc).unwrap();
            let z = d3pm_step(&zt, &[0.0, 0.0, 40.0], 60, 0, &s, FinalDecode::Argmax, &mut rng).unwrap();
            assert_eq!(z.argmax(), 2);
        }
    }

    #[test]
    fn step_rejects_nonfinite_logits() {
        let s = cosine_discrete_schedule(10, 2).unwrap();
        let zt = OneHot::hard(2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(d3pm_step(&zt, &[f64::NAN, 0.0], 5, 1, &s, FinalDecode::Argmax, &mut rng).is_err());
    }
}
