//! Gaussian forward process and the DDPM / DDIM reverse steps used for the
//! image and the continuous scalar.

use crate::error::{invalid, Error, Result};
use crate::schedule::GaussianSchedule;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    Ok(())
}

/// Closed-form marginal `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`. `t = 0` returns `x0`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &GaussianSchedule) -> Result<Vec<f64>> {
    same_len(x0, eps)?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One transition of the Markov chain: `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise`.
pub fn q_step(x_prev: &[f64], t: usize, noise: &[f64], sched: &GaussianSchedule) -> Result<Vec<f64>> {
    same_len(x_prev, noise)?;
    let beta = sched.beta(t)?;
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    Ok(x_prev.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
}

pub fn predict_x0(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &GaussianSchedule) -> Result<Vec<f64>> {
    same_len(x_t, eps_hat)?;
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(invalid(format!("alpha_bar at step {t} is zero")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect())
}

/// Ancestral DDPM step `t -> t-1` with posterior variance
/// `beta_t (1 - ab_{t-1}) / (1 - ab_t)`. At `t = 1` the noise is ignored.
pub fn ddpm_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    noise: &[f64],
    sched: &GaussianSchedule,
) -> Result<Vec<f64>> {
    same_len(x_t, eps_hat)?;
    same_len(x_t, noise)?;
    let beta = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t - 1)?;
    let scale = 1.0 / (1.0 - beta).sqrt();
    let coef = if ab < 1.0 { beta / (1.0 - ab).sqrt() } else { 0.0 };
    let sigma = if t > 1 && ab < 1.0 {
        (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
    } else {
        0.0
    };
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((x, e), n)| scale * (x - coef * e) + sigma * n)
        .collect())
}

/// Deterministic DDIM jump `t -> t_prev` (eta = 0).
pub fn ddim_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    sched: &GaussianSchedule,
) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(invalid(format!("ddim jump {t} -> {t_prev} must decrease")));
    }
    let x0 = predict_x0(x_t, eps_hat, t, sched)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(x0.iter().zip(eps_hat).map(|(x, e)| a * x + b * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{linear_beta_schedule, GaussianScheduleSpec};

    /// Two-step schedule with alpha_bar = [1, 0.64, 0.25].
    fn two_step() -> GaussianSchedule {
        GaussianSchedule::from_betas(vec![0.36, 1.0 - 0.25 / 0.64]).unwrap()
    }

    #[test]
    fn q_sample_cases() {
        let s = two_step();
        assert_eq!(q_sample(&[3.5], 0, &[1.0], &s).unwrap(), vec![3.5]);
        let v = q_sample(&[1.0], 1, &[0.0], &s).unwrap();
        assert!((v[0] - 0.8).abs() < 1e-15);
        let v = q_sample(&[0.0], 1, &[2.0], &s).unwrap();
        assert!((v[0] - 0.6 * 2.0).abs() < 1e-15);
        assert!(q_sample(&[0.0, 1.0], 1, &[2.0], &s).is_err());
        assert!(q_sample(&[0.0], 3, &[2.0], &s).is_err());
    }

    #[test]
    fn predict_x0_cases() {
        let s = two_step();
        let x0 = [0.3, -1.2, 0.9];
        let eps = [0.1, 0.7, -2.0];
        let xt = q_sample(&x0, 2, &eps, &s).unwrap();
        let back = predict_x0(&xt, &eps, 2, &s).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-10);
        }
        // (1.4330 - sqrt(0.75) * 0.5) / 0.5
        let v = predict_x0(&[1.4330], &[0.5], 2, &s).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-4);
        let v = predict_x0(&[1.0], &[0.0], 2, &s).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn predict_x0_rejects_zero_alpha_bar() {
        let s = GaussianSchedule::from_betas(vec![1.0]).unwrap();
        assert!(predict_x0(&[1.0], &[0.0], 1, &s).is_err());
    }

    #[test]
    fn ddim_cases() {
        let s = two_step();
        let v = ddim_step(&[1.4330], &[0.5], 2, 1, &s).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-4);
        assert!(ddim_step(&[1.0], &[0.0], 1, 1, &s).is_err());

        let x0 = [0.25, -0.5];
        let eps = [1.3, -0.4];
        let mut x = q_sample(&x0, 2, &eps, &s).unwrap();
        x = ddim_step(&x, &eps, 2, 1, &s).unwrap();
        x = ddim_step(&x, &eps, 1, 0, &s).unwrap();
        for (a, b) in x.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_noop_when_alpha_bar_unchanged() {
        // beta = 1e-300 keeps alpha_bar equal to machine precision.
        let s = GaussianSchedule::from_betas(vec![0.5, 1e-300]).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), s.alpha_bar(2).unwrap());
        let v = ddim_step(&[0.7], &[0.2], 2, 1, &s).unwrap();
        assert!((v[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn ddpm_final_step_ignores_noise() {
        let s = linear_beta_schedule(10, 0.01, 0.2).unwrap();
        let a = ddpm_step(&[0.4], &[0.3], 1, &[0.0], &s).unwrap();
        let b = ddpm_step(&[0.4], &[0.3], 1, &[5.0], &s).unwrap();
        assert_eq!(a, b);
        let s = GaussianScheduleSpec::default().build().unwrap();
        let a = ddpm_step(&[0.4], &[0.3], 7, &[0.0], &s).unwrap();
        let b = ddpm_step(&[0.4], &[0.3], 7, &[1.0], &s).unwrap();
        assert_ne!(a, b);
        assert!(ddpm_step(&[0.4], &[0.3], 0, &[0.0], &s).is_err());
    }

    #[test]
    fn ddpm_tiny_beta_is_identity_up_to_rounding() {
        let s = GaussianSchedule::from_betas(vec![0.3, 1e-300]).unwrap();
        let v = ddpm_step(&[0.9], &[0.4], 2, &[1.0], &s).unwrap();
        assert!((v[0] - 0.9).abs() < 1e-12);
    }
}
