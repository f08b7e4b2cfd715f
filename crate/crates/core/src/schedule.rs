//! Noise schedule, closed-form forward noising and the ancestral reverse step.
//!
//! Timesteps are 1-indexed: `t = 0` denotes clean data with ᾱ₀ = 1.

use ndarray::{ArrayBase, Data, Dimension, Zip};
use ndarray::Array;

use crate::error::{Result, TideError};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas evenly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(TideError::invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(TideError::invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(TideError::invalid("schedule needs at least one timestep"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(TideError::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// Builds the schedule a sampler uses when visiting only `timesteps`
    /// (ascending, each in 1..=T). Step k of the result jumps from
    /// `timesteps[k-1]` down to `timesteps[k-2]` (or to clean data).
    pub fn retimed(&self, timesteps: &[usize]) -> Result<Self> {
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            let ab = self.alpha_bar(t)?;
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Self::from_betas(betas)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(TideError::Timestep { t, max: self.len() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas[t - 1])
    }

    /// ᾱ_t with ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Posterior standard deviation σ_t, zero at t = 1.
    pub fn posterior_std(&self, t: usize) -> Result<f64> {
        let beta = self.beta(t)?;
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t - 1)?;
        Ok((beta * (1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt())
    }

    /// Evenly spaced visiting order for a sampler with `steps` network calls,
    /// ascending and always ending at T.
    pub fn uniform_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(TideError::invalid(format!("sampler steps {steps} outside 1..={total}")));
        }
        Ok((1..=steps).map(|k| ((k * total) as f64 / steps as f64).round() as usize).collect())
    }
}

fn same_shape<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<()>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(TideError::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps.
pub fn q_sample<S1, S2, D>(
    z0: &ArrayBase<S1, D>,
    t: usize,
    eps: &ArrayBase<S2, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<f64, D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    same_shape(z0, eps)?;
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(z0).and(eps).map_collect(|&z, &e| a * z + b * e))
}

/// One ancestral step: μ_t + σ_t · noise with the posterior variance.
/// `noise` is ignored at t = 1.
pub fn ddpm_step<S1, S2, S3, D>(
    z_t: &ArrayBase<S1, D>,
    eps_hat: &ArrayBase<S2, D>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &ArrayBase<S3, D>,
) -> Result<Array<f64, D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    S3: Data<Elem = f64>,
    D: Dimension,
{
    same_shape(z_t, eps_hat)?;
    same_shape(z_t, noise)?;
    let beta = schedule.beta(t)?;
    let alpha = schedule.alpha(t)?;
    let ab = schedule.alpha_bar(t)?;
    let sigma = if t == 1 { 0.0 } else { schedule.posterior_std(t)? };
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    Ok(Zip::from(z_t).and(eps_hat).and(noise).map_collect(|&z, &e, &n| {
        let mu = (z - coef * e) * inv_sqrt_alpha;
        if t == 1 {
            mu
        } else {
            mu + sigma * n
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};

    #[test]
    fn linear_betas_evenly_spaced() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        for (b, e) in s.betas().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((b - e).abs() < 1e-15);
        }
        // direct product oracle
        let prod: f64 = [0.9, 0.8, 0.7, 0.6].iter().product();
        assert!((s.alpha_bar(4).unwrap() - prod).abs() < 1e-12);
        assert!((prod - 0.3024).abs() < 1e-12);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_closed_form() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let z = q_sample(&arr1(&[1.0]), 4, &arr1(&[1.0]), &s).unwrap();
        assert!((z[0] - 1.38514).abs() < 1e-5, "{}", z[0]);
        let zero = q_sample(&arr1(&[2.0, -1.0]), 2, &arr1(&[0.0, 0.0]), &s).unwrap();
        let k = s.alpha_bar(2).unwrap().sqrt();
        assert_eq!(zero, arr1(&[2.0 * k, -k]));
    }

    #[test]
    fn q_sample_errors() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        assert!(matches!(
            q_sample(&arr1(&[1.0]), 5, &arr1(&[1.0]), &s),
            Err(TideError::Timestep { t: 5, max: 4 })
        ));
        assert!(q_sample(&arr1(&[1.0]), 0, &arr1(&[1.0]), &s).is_err());
        assert!(matches!(q_sample(&arr1(&[1.0]), 1, &arr1(&[1.0, 2.0]), &s), Err(TideError::Shape(_))));
    }

    #[test]
    fn ddpm_step_hand_substitution() {
        // betas chosen so that β₂ = 0.2, ᾱ₁ = 0.9, ᾱ₂ = 0.72
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let out = ddpm_step(&arr1(&[1.0]), &arr1(&[0.5]), 2, &s, &arr1(&[0.0])).unwrap();
        let mu = (1.0 - 0.2 / 0.28f64.sqrt() * 0.5) / 0.8f64.sqrt();
        assert!((out[0] - mu).abs() < 1e-12);
        let sigma2: f64 = 0.2 * (1.0 - 0.9) / (1.0 - 0.72);
        let noisy = ddpm_step(&arr1(&[1.0]), &arr1(&[0.5]), 2, &s, &arr1(&[1.0])).unwrap();
        assert!((noisy[0] - mu - sigma2.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn last_step_ignores_noise() {
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        let a = ddpm_step(&arr1(&[0.4]), &arr1(&[0.1]), 1, &s, &arr1(&[0.0])).unwrap();
        let b = ddpm_step(&arr1(&[0.4]), &arr1(&[0.1]), 1, &s, &arr1(&[5.0])).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.posterior_std(1).unwrap(), 0.0);
    }

    #[test]
    fn single_step_inversion() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let z0: Array1<f64> = arr1(&[0.25, -1.5, 0.75]);
        let eps = arr1(&[0.3, 0.1, -2.0]);
        let zt = q_sample(&z0, 1, &eps, &s).unwrap();
        let back = ddpm_step(&zt, &eps, 1, &s, &Array1::zeros(3)).unwrap();
        for (a, b) in back.iter().zip(z0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn retimed_schedule_preserves_alpha_bars() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let ts = s.uniform_timesteps(5).unwrap();
        assert_eq!(ts, vec![2, 4, 6, 8, 10]);
        let r = s.retimed(&ts).unwrap();
        for (k, &t) in ts.iter().enumerate() {
            assert!((r.alpha_bar(k + 1).unwrap() - s.alpha_bar(t).unwrap()).abs() < 1e-12);
        }
        assert_eq!(s.retimed(&s.uniform_timesteps(10).unwrap()).unwrap().len(), 10);
        assert!(s.uniform_timesteps(11).is_err());
    }
}
