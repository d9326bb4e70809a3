//! Probability-flow ODE samplers (Euler, Heun) over a rho-spaced noise grid.
//!
//! The ODE is `dx/dsigma = (x - D(x; sigma)) / sigma`, integrated from
//! `sigma_max` down to zero. Both samplers take the denoiser as a closure
//! `D(x, sigma, condition)`; the condition is handed through untouched at
//! every evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            sigma_max: 80.0,
            sigma_min: 0.002,
            rho: 7.0,
            steps: 20,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        karras_schedule(self.sigma_max, self.sigma_min, self.rho, self.steps)
    }
}

/// Strictly decreasing `sigma_0 = sigma_max > ... > sigma_{N-1} > sigma_N = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    grid: Vec<f64>,
}

impl NoiseSchedule {
    /// Wraps an explicit grid, checking that it decreases strictly to zero.
    pub fn from_grid(grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || *grid.last().expect("non-empty") != 0.0 {
            return Err(Error::Config("schedule must end at sigma = 0".into()));
        }
        if grid
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Greater))
            || !grid[0].is_finite()
        {
            return Err(Error::Config(format!("schedule is not strictly decreasing: {grid:?}")));
        }
        Ok(NoiseSchedule { grid })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.grid
    }

    /// Number of integration steps `N`.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.grid[0]
    }
}

/// `sigma_i = (smax^(1/rho) + i/(N-1) (smin^(1/rho) - smax^(1/rho)))^rho`
/// for `i < N`, then a terminal zero. `N == 1` gives `[sigma_max, 0]`.
pub fn karras_schedule(sigma_max: f64, sigma_min: f64, rho: f64, steps: usize) -> Result<NoiseSchedule> {
    if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
        return Err(Error::Config(format!(
            "need sigma_max > sigma_min > 0, got {sigma_max} and {sigma_min}"
        )));
    }
    if steps == 0 || rho.is_nan() || rho <= 0.0 {
        return Err(Error::Config(format!("invalid steps {steps} or rho {rho}")));
    }
    let mut grid = Vec::with_capacity(steps + 1);
    if steps == 1 {
        grid.push(sigma_max);
    } else {
        let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
        for i in 0..steps {
            let t = i as f64 / (steps - 1) as f64;
            grid.push((a + t * (b - a)).powf(rho));
        }
        // Pin the endpoints against powf round-off.
        grid[0] = sigma_max;
        grid[steps - 1] = sigma_min;
    }
    grid.push(0.0);
    NoiseSchedule::from_grid(grid)
}

fn check_finite(x: &Tensor, step: usize, sigma: f64, solver: &str) -> Result<()> {
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{solver} state element {i} at step {step} (sigma = {sigma})"
        )));
    }
    Ok(())
}

fn drift(x: &Tensor, denoised: &Tensor, sigma: f64) -> Result<Vec<f64>> {
    if denoised.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "denoiser returned {:?} for state {:?}",
            denoised.shape(),
            x.shape()
        )));
    }
    Ok(x.data()
        .iter()
        .zip(denoised.data())
        .map(|(a, d)| (a - d) / sigma)
        .collect())
}

fn axpy(x: &Tensor, h: f64, d: &[f64]) -> Tensor {
    let data = x.data().iter().zip(d).map(|(a, b)| a + h * b).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Initial state `sigma_max * eps`.
pub fn initial_state<R: Rng + ?Sized>(schedule: &NoiseSchedule, shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, schedule.sigma_max(), rng)
}

/// First-order integration from a given initial state.
pub fn euler_from<F>(mut denoiser: F, schedule: &NoiseSchedule, condition: &Tensor, x0: Tensor) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64, &Tensor) -> Result<Tensor>,
{
    let s = schedule.sigmas();
    let mut x = x0;
    for i in 0..schedule.steps() {
        let d = drift(&x, &denoiser(&x, s[i], condition)?, s[i])?;
        x = axpy(&x, s[i + 1] - s[i], &d);
        check_finite(&x, i, s[i + 1], "euler")?;
    }
    Ok(x)
}

/// Heun's method; the corrector is skipped on the final step to `sigma = 0`.
pub fn heun_from<F>(mut denoiser: F, schedule: &NoiseSchedule, condition: &Tensor, x0: Tensor) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64, &Tensor) -> Result<Tensor>,
{
    let s = schedule.sigmas();
    let mut x = x0;
    for i in 0..schedule.steps() {
        let h = s[i + 1] - s[i];
        let d = drift(&x, &denoiser(&x, s[i], condition)?, s[i])?;
        let pred = axpy(&x, h, &d);
        x = if s[i + 1] > 0.0 {
            let d2 = drift(&pred, &denoiser(&pred, s[i + 1], condition)?, s[i + 1])?;
            let avg: Vec<f64> = d.iter().zip(&d2).map(|(a, b)| 0.5 * (a + b)).collect();
            axpy(&x, h, &avg)
        } else {
            pred
        };
        check_finite(&x, i, s[i + 1], "heun")?;
    }
    Ok(x)
}

pub fn euler_sample<F, R>(
    denoiser: F,
    schedule: &NoiseSchedule,
    condition: &Tensor,
    shape: &[usize],
    rng: &mut R,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64, &Tensor) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    let x0 = initial_state(schedule, shape, rng);
    euler_from(denoiser, schedule, condition, x0)
}

pub fn heun_sample<F, R>(
    denoiser: F,
    schedule: &NoiseSchedule,
    condition: &Tensor,
    shape: &[usize],
    rng: &mut R,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64, &Tensor) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    let x0 = initial_state(schedule, shape, rng);
    heun_from(denoiser, schedule, condition, x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_grid() {
        let s = karras_schedule(80.0, 0.002, 7.0, 1).unwrap();
        assert_eq!(s.sigmas(), &[80.0, 0.0]);
    }

    #[test]
    fn two_step_grid_hits_endpoints() {
        let s = karras_schedule(80.0, 0.002, 7.0, 2).unwrap();
        assert_eq!(s.sigmas(), &[80.0, 0.002, 0.0]);
    }

    #[test]
    fn invalid_ordering_rejected() {
        assert!(karras_schedule(0.002, 80.0, 7.0, 10).is_err());
        assert!(karras_schedule(80.0, 0.0, 7.0, 10).is_err());
        assert!(karras_schedule(80.0, 0.002, 7.0, 0).is_err());
        assert!(NoiseSchedule::from_grid(vec![1.0, 2.0, 0.0]).is_err());
        assert!(NoiseSchedule::from_grid(vec![1.0, 0.5]).is_err());
    }

    #[test]
    fn fixed_point_denoiser_returns_initial_noise() {
        let s = karras_schedule(80.0, 0.002, 7.0, 12).unwrap();
        let cond = Tensor::zeros(&[1, 1, 2, 2]);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let out = euler_sample(|x, _, _| Ok(x.clone()), &s, &cond, &[1, 1, 2, 2], &mut r1).unwrap();
        assert_eq!(out, initial_state(&s, &[1, 1, 2, 2], &mut r2));
    }

    #[test]
    fn one_step_heun_is_one_euler_step() {
        let s = karras_schedule(80.0, 0.002, 7.0, 1).unwrap();
        let cond = Tensor::zeros(&[1]);
        let x0 = Tensor::new(vec![1], vec![40.0]).unwrap();
        let mut calls = 0;
        let out = heun_from(
            |x, _, _| {
                calls += 1;
                Ok(Tensor::new(vec![1], vec![x.item() * 0.25]).unwrap())
            },
            &s,
            &cond,
            x0,
        )
        .unwrap();
        assert_eq!(calls, 1);
        // x - sigma * (x - D)/sigma = D(x)
        assert_eq!(out.item(), 10.0);
    }

    #[test]
    fn non_finite_state_aborts() {
        let s = karras_schedule(80.0, 0.002, 7.0, 3).unwrap();
        let cond = Tensor::zeros(&[1]);
        let err = euler_from(
            |_, _, _| Ok(Tensor::new(vec![1], vec![f64::INFINITY]).unwrap()),
            &s,
            &cond,
            Tensor::zeros(&[1]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn condition_passed_through_unchanged() {
        let s = karras_schedule(10.0, 0.01, 7.0, 5).unwrap();
        let cond = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut seen = 0;
        heun_from(
            |x, _, c| {
                assert_eq!(c, &cond);
                seen += 1;
                Ok(x.clone())
            },
            &s,
            &cond,
            Tensor::zeros(&[3]),
        )
        .unwrap();
        assert_eq!(seen, 9);
    }
}
