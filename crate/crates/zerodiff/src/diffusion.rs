//! Diffusion mathematics: variance schedules, forward (noising) sampling,
//! posterior (renoising) sampling and noise-to-data ratios.
//!
//! The forward chain is `q(x_t | x_{t-1}) = N(sqrt(1-beta_t) x_{t-1}, beta_t I)`,
//! so the marginal at step `t` is `N(sqrt(abar_t) x_0, (1-abar_t) I)` with
//! `abar_t = prod_{j<=t} (1-beta_j)`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A discrete variance schedule over `T` steps.
///
/// `alpha_bars` and `n2d` are indexed by `t in 0..=T` with `alpha_bars[0] = 1`
/// and `n2d[0] = 0`; `betas` is indexed by `t-1` for `t in 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub n2d: Vec<f64>,
}

impl DiffusionSchedule {
    /// Build a schedule from raw per-step variances, checking all invariants.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        for (i, b) in betas.iter().enumerate() {
            if !(b.is_finite() && *b > 0.0 && *b < 1.0) {
                return Err(Error::Config(format!("beta_{} = {} not in (0,1)", i + 1, b)));
            }
        }
        let t_max = betas.len();
        let mut alpha_bars = Vec::with_capacity(t_max + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let last = *alpha_bars.last().unwrap();
            alpha_bars.push(last * (1.0 - b));
        }
        let n2d = alpha_bars.iter().map(|a| 1.0 - a.sqrt()).collect();
        Ok(Self { t_max, betas, alpha_bars, n2d })
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// N2D ratio `kappa_t = 1 - sqrt(abar_t)`.
    pub fn kappa(&self, t: usize) -> f64 {
        self.n2d[t]
    }

    /// Posterior mean coefficients `(c0, ct)` and variance `beta_tilde` for
    /// `q(x_{t-1} | x_0, x_t)`: mean = c0 * x_0 + ct * x_t.
    pub fn posterior_coeffs(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        let ab_prev = self.alpha_bars[t - 1];
        let ab = self.alpha_bars[t];
        let beta = self.betas[t - 1];
        let alpha = 1.0 - beta;
        let denom = 1.0 - ab;
        let c0 = ab_prev.sqrt() * beta / denom;
        let ct = alpha.sqrt() * (1.0 - ab_prev) / denom;
        let beta_tilde = (1.0 - ab_prev) / denom * beta;
        Ok((c0, ct, beta_tilde))
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::StepOutOfRange { t, max: self.t_max });
        }
        Ok(())
    }
}

/// VP-SDE discretization: with continuous times `t_i = i/T`,
/// `abar(t) = exp(-0.5 t^2 (beta_max - beta_min) - t beta_min)` and
/// `beta_i = 1 - abar(t_i)/abar(t_{i-1})`.
pub fn build_vp_schedule(t_max: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if t_max == 0 {
        return Err(Error::Config("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max) {
        return Err(Error::Config(format!(
            "need 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
        )));
    }
    let log_abar = |t: f64| -0.5 * t * t * (beta_max - beta_min) - t * beta_min;
    let mut betas = Vec::with_capacity(t_max);
    for i in 1..=t_max {
        let t0 = (i - 1) as f64 / t_max as f64;
        let t1 = i as f64 / t_max as f64;
        betas.push(1.0 - (log_abar(t1) - log_abar(t0)).exp());
    }
    DiffusionSchedule::from_betas(betas)
}

/// A batch noised to step `t`, keeping the Gaussian draws for testability:
/// `x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps`.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x_t: Array2<f64>,
    pub t: usize,
    pub eps: Array2<f64>,
}

/// Sample the closed-form forward marginal `q(x_t | x_0)`.
pub fn forward_sample<R: Rng>(
    schedule: &DiffusionSchedule,
    x_0: &Array2<f64>,
    t: usize,
    rng: &mut R,
) -> Result<NoisedBatch> {
    schedule.check_step(t)?;
    if !x_0.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("x_0 contains non-finite values".into()));
    }
    let ab = schedule.alpha_bar(t);
    let eps = Array2::from_shape_simple_fn(x_0.raw_dim(), || rng.sample(StandardNormal));
    let x_t = x_0.mapv(|v| v * ab.sqrt()) + eps.mapv(|e| e * (1.0 - ab).sqrt());
    Ok(NoisedBatch { x_t, t, eps })
}

/// Sample `x_{t-1} ~ q(x_{t-1} | x_0_hat, x_t)`. At `t = 1` the posterior is
/// degenerate and the result equals `x_0_hat` exactly.
pub fn posterior_sample<R: Rng>(
    schedule: &DiffusionSchedule,
    x_0_hat: &Array2<f64>,
    x_t: &Array2<f64>,
    t: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    if x_0_hat.raw_dim() != x_t.raw_dim() {
        return Err(Error::DimMismatch(format!(
            "x_0_hat {:?} vs x_t {:?}",
            x_0_hat.shape(),
            x_t.shape()
        )));
    }
    if t == 1 {
        return Ok(x_0_hat.clone());
    }
    let (c0, ct, beta_tilde) = schedule.posterior_coeffs(t)?;
    let sigma = beta_tilde.sqrt();
    let mut out = x_0_hat.mapv(|v| v * c0) + x_t.mapv(|v| v * ct);
    out.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    Ok(out)
}

/// Mutual-learning weight `kappa_t^gamma`.
pub fn n2d_weight(schedule: &DiffusionSchedule, t: usize, gamma: f64) -> Result<f64> {
    schedule.check_step(t)?;
    if gamma < 0.0 {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(schedule.kappa(t).powf(gamma))
}
