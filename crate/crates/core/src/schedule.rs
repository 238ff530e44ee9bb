//! Noise schedules and DDIM step plans.
//!
//! Time steps are 1-based (`1..=T`). `alpha_bar(0)` is defined as 1 so the
//! final generation step into `t = 0` recovers the clean prediction exactly.

use crate::error::{Error, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Fixed variance schedule `β_t` with derived `α_t = 1 − β_t` and
/// `ᾱ_t = Π_{s≤t} α_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β` from `beta_start` to `beta_end`, both endpoints included.
    pub fn linear(horizon: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::Range(format!(
                "horizon T={horizon} must be at least 2"
            )));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) || beta_start > beta_end {
            return Err(Error::Range(format!(
                "need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
            )));
        }
        let span = beta_end - beta_start;
        let mut betas: Vec<f64> = (0..horizon)
            .map(|i| beta_start + span * (i as f64 / (horizon - 1) as f64))
            .collect();
        betas[horizon - 1] = beta_end;
        let s = Self::from_betas(betas);
        if s.alpha_bar(horizon) <= 0.0 {
            return Err(Error::Range("alpha_bar underflows to zero".into()));
        }
        Ok(s)
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    /// Diffusion horizon `T`.
    pub fn horizon(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon() {
            return Err(Error::Range(format!(
                "time step {t} outside 1..={}",
                self.horizon()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
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

    pub fn validate_step(&self, t: usize) -> Result<()> {
        self.check(t)
    }

    /// Standard deviation of the DDPM posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_std(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        ((1.0 - ab_prev) * self.beta(t) / (1.0 - ab)).sqrt()
    }

    /// DDIM variance parameter
    /// `σ(η) = η·√((1−ᾱ_prev)/(1−ᾱ_cur))·√(1−ᾱ_cur/ᾱ_prev)`.
    ///
    /// `tau_prev` may be 0 (the step into the clean sample), where σ is 0.
    pub fn ddim_sigma(&self, tau_prev: usize, tau_cur: usize, eta: f64) -> Result<f64> {
        if tau_prev >= tau_cur {
            return Err(Error::Ordering(tau_prev, tau_cur));
        }
        self.check(tau_cur)?;
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Range(format!(
                "eta must be finite and >= 0, got {eta}"
            )));
        }
        let ab_prev = self.alpha_bar(tau_prev);
        let ab_cur = self.alpha_bar(tau_cur);
        let ratio = ((1.0 - ab_prev) / (1.0 - ab_cur)).sqrt();
        let jump = (1.0 - ab_cur / ab_prev).max(0.0).sqrt();
        Ok(eta * ratio * jump)
    }
}

/// Increasing subsequence `τ_1 = 1 < … < τ_S = t0` used by DDIM inversion
/// and regeneration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepPlan {
    taus: Vec<usize>,
    t0: usize,
}

impl StepPlan {
    /// `t_ddim` points evenly spread over `[1, t0]`, rounded half-up; any
    /// collision is resolved by bumping forward.
    pub fn build(t_ddim: usize, t0: usize, horizon: usize) -> Result<Self> {
        if t0 == 0 || t0 > horizon {
            return Err(Error::Range(format!("t0={t0} outside 1..={horizon}")));
        }
        if t_ddim < 2 {
            return Err(Error::Range(format!("T_ddim={t_ddim} must be at least 2")));
        }
        if t_ddim > t0 {
            return Err(Error::InfeasiblePlan { t_ddim, t0 });
        }
        let s1 = t_ddim - 1;
        let span = t0 - 1;
        let mut taus: Vec<usize> = (0..t_ddim)
            // round_half_up(1 + span·i/s1) in exact integer arithmetic
            .map(|i| (2 * (s1 + span * i) + s1) / (2 * s1))
            .collect();
        for i in 1..taus.len() {
            if taus[i] <= taus[i - 1] {
                taus[i] = taus[i - 1] + 1;
            }
        }
        debug_assert_eq!(taus[0], 1);
        debug_assert_eq!(*taus.last().unwrap(), t0);
        Ok(Self { taus, t0 })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }
}
