//! Forward noise process: schedule of per-step multipliers and the exact
//! noising map `x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps`.

use crate::error::{Error, Result};
use crate::tensor::ArrD;

/// Per-step noise multipliers with precomputed cumulative products.
///
/// `alpha_bar(0) = 1` (empty product), so step 0 is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-beta schedule; the conventional default is
    /// `linear(1000, 1e-4, 2e-2)`.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(total_steps >= 1);
        let betas: Vec<f64> = (0..total_steps)
            .map(|i| {
                if total_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (total_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(&betas)
    }

    pub fn from_betas(betas: &[f64]) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        Self::from_alphas(alphas)
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Self {
        assert!(
            alphas.iter().all(|&a| a > 0.0 && a <= 1.0),
            "alphas must lie in (0, 1]"
        );
        let mut alpha_bars = Vec::with_capacity(alphas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        NoiseSchedule { alphas, alpha_bars }
    }

    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 2e-2)
    }

    pub fn total_steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Cumulative product up to step `t` (inclusive); `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} out of range 0..={}", self.total_steps())))
    }
}

/// Ordered diffusion timesteps used for feature extraction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeStepSpec {
    steps: Vec<usize>,
}

impl TimeStepSpec {
    /// Strictly increasing steps within the schedule range.
    pub fn new(steps: Vec<usize>, total_steps: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("timestep spec must not be empty"));
        }
        for w in steps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid("timesteps must be strictly increasing"));
            }
        }
        if let Some(&last) = steps.last() {
            if last > total_steps {
                return Err(Error::invalid(format!(
                    "timestep {last} exceeds schedule total {total_steps}"
                )));
            }
        }
        Ok(TimeStepSpec { steps })
    }

    /// Like [`TimeStepSpec::new`] but allows repeated steps; repeated steps
    /// duplicate channels in the extracted pyramid.
    pub fn with_repeats(steps: Vec<usize>, total_steps: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("timestep spec must not be empty"));
        }
        if steps.iter().any(|&s| s > total_steps) {
            return Err(Error::invalid("timestep out of schedule range"));
        }
        Ok(TimeStepSpec { steps })
    }

    pub fn single(t: usize, total_steps: usize) -> Result<Self> {
        Self::new(vec![t], total_steps)
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `x_t = sqrt(abar_t) * x + sqrt(1 - abar_t) * eps`, exactly.
pub fn add_noise(x: &ArrD, t: usize, eps: &ArrD, schedule: &NoiseSchedule) -> Result<ArrD> {
    if x.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "noise shape {:?} does not match input shape {:?}",
            eps.shape(),
            x.shape()
        )));
    }
    let abar = schedule.alpha_bar(t)?;
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    let mut out = x.clone();
    out.zip_mut_with(eps, |xv, &ev| *xv = a * *xv + b * ev);
    Ok(out)
}

/// Invert the noising map: `x = (x_t - sqrt(1-abar) eps) / sqrt(abar)`.
pub fn invert_noise(x_t: &ArrD, t: usize, eps: &ArrD, schedule: &NoiseSchedule) -> Result<ArrD> {
    if x_t.shape() != eps.shape() {
        return Err(Error::shape("inversion shape mismatch".to_string()));
    }
    let abar = schedule.alpha_bar(t)?;
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    let mut out = x_t.clone();
    out.zip_mut_with(eps, |xv, &ev| *xv = (*xv - b * ev) / a);
    Ok(out)
}
