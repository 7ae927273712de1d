use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Precomputed per-timestep coefficients of a variance-preserving noise
/// schedule. `alpha[t]` and `sigma[t]` scale signal and noise at step t;
/// index 0 is the clean boundary (alpha 1, sigma 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    t_max: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds the schedule from a linear beta ramp: cumulative products
    /// `abar_t = prod(1 - beta_i)` with `alpha_t = sqrt(abar_t)` and
    /// `sigma_t = sqrt(1 - abar_t)`, so `alpha^2 + sigma^2 = 1` by
    /// construction.
    pub fn new(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start < end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut alpha = Vec::with_capacity(t_max + 1);
        let mut sigma = Vec::with_capacity(t_max + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        let mut abar = 1.0;
        for i in 0..t_max {
            let beta = if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            };
            abar *= 1.0 - beta;
            alpha.push(abar.sqrt());
            sigma.push((1.0 - abar).sqrt());
        }
        Ok(Self {
            t_max,
            alpha,
            sigma,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Per-step noise rate recovered from the cumulative products.
    pub fn beta(&self, t: usize) -> f64 {
        debug_assert!(t >= 1 && t <= self.t_max);
        let ratio = self.alpha[t] / self.alpha[t - 1];
        1.0 - ratio * ratio
    }

    pub fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = usize::from(!allow_zero);
        if t < lo || t > self.t_max {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.t_max,
            });
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn from_parts(alpha: Vec<f64>, sigma: Vec<f64>) -> Self {
        Self {
            t_max: alpha.len() - 1,
            alpha,
            sigma,
        }
    }
}

/// `alpha_t * z0 + sigma_t * eps`. The t = 0 boundary is allowed (returns z0
/// exactly) so tests can pin the clean end of the schedule.
pub fn forward_diffuse(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    sched.check_t(t, true)?;
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            left: z0.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    if t == 0 {
        return Ok(z0.clone());
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(z, e)| a * z + s * e)
        .collect();
    Tensor::new(z0.shape(), data)
}
