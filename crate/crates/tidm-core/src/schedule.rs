//! Noise schedule, forward noising, DDIM step, strength-to-timestep map.

use crate::error::{Result, TidmError};
use crate::numerics::Tensor;

/// Diffusion coefficients over `T` steps: betas in (0,1), alphas = 1-beta,
/// alpha_bars the running product, plus per-step loss weights (default 1).
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f32>,
    alphas: Vec<f32>,
    alpha_bars: Vec<f32>,
    loss_weights: Vec<f32>,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl NoiseSchedule {
    /// Linear beta schedule, endpoints inclusive.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps < 2 {
            return Err(TidmError::invalid(format!(
                "schedule: T must be >= 2, got {t_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(TidmError::invalid(format!(
                "schedule: need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = Vec::with_capacity(t_steps);
        let mut alphas = Vec::with_capacity(t_steps);
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut prod = 1.0f64;
        for i in 0..t_steps {
            let frac = i as f64 / (t_steps - 1) as f64;
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            betas.push(beta as f32);
            alphas.push((1.0 - beta) as f32);
            alpha_bars.push(prod as f32);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            loss_weights: vec![1.0; t_steps],
        })
    }

    pub fn default_schedule() -> Self {
        Self::linear(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn betas(&self) -> &[f32] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f32] {
        &self.alphas
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f32] {
        &self.alpha_bars
    }

    pub fn loss_weight(&self, t: usize) -> f32 {
        self.loss_weights[t]
    }

    /// Replace the per-step loss weights (all must be positive).
    pub fn set_loss_weights(&mut self, weights: Vec<f32>) -> Result<()> {
        if weights.len() != self.len() || weights.iter().any(|&w| !(w > 0.0)) {
            return Err(TidmError::invalid(
                "schedule: loss weights must have length T and be positive",
            ));
        }
        self.loss_weights = weights;
        Ok(())
    }

    fn check_t(&self, t: usize, op: &'static str) -> Result<()> {
        if t >= self.len() {
            return Err(TidmError::invalid(format!(
                "{op}: timestep {t} out of range [0, {})",
                self.len()
            )));
        }
        Ok(())
    }

    /// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t, "add_noise")?;
        let ab = self.alpha_bars[t];
        let signal = ab.sqrt();
        let noise = (1.0 - ab).sqrt();
        x0.scale(signal).add_scaled(eps, noise)
    }

    /// One deterministic DDIM update from t down to t_prev, where
    /// t_prev = -1 is the terminal step with abar = 1.
    /// Returns (z_prev, x0_hat).
    pub fn ddim_step(
        &self,
        z_t: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        t_prev: i64,
    ) -> Result<(Tensor, Tensor)> {
        self.check_t(t, "ddim_step")?;
        if t_prev >= t as i64 || t_prev < -1 {
            return Err(TidmError::invalid(format!(
                "ddim_step: need T > t > t_prev >= -1, got t={t}, t_prev={t_prev}"
            )));
        }
        let ab_t = self.alpha_bars[t];
        let ab_prev = if t_prev < 0 {
            1.0
        } else {
            self.alpha_bars[t_prev as usize]
        };
        let x0_hat = z_t
            .add_scaled(eps_hat, -(1.0 - ab_t).sqrt())?
            .scale(1.0 / ab_t.sqrt());
        x0_hat.check_finite("ddim_step")?;
        let z_prev = x0_hat
            .scale(ab_prev.sqrt())
            .add_scaled(eps_hat, (1.0 - ab_prev).sqrt())?;
        Ok((z_prev, x0_hat))
    }

    /// Evenly spaced S-step DDIM subsequence of [0, T): t_k = k * (T / S).
    pub fn ddim_timesteps(&self, s_steps: usize) -> Result<Vec<usize>> {
        if s_steps == 0 || s_steps > self.len() {
            return Err(TidmError::invalid(format!(
                "ddim_timesteps: need 1 <= S <= {}, got {s_steps}",
                self.len()
            )));
        }
        let stride = self.len() / s_steps;
        Ok((0..s_steps).map(|k| k * stride).collect())
    }

    /// Timesteps actually run for a denoising strength in [0, 1]: the
    /// floor(strength * S) least-noisy steps of the S-step subsequence, in
    /// sampling (descending) order. Returns (t_start, substeps);
    /// strength 0 runs nothing and t_start is None (replica contract).
    pub fn strength_to_start(
        &self,
        strength: f64,
        s_steps: usize,
    ) -> Result<(Option<usize>, Vec<usize>)> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(TidmError::invalid(format!(
                "strength_to_start: strength {strength} outside [0, 1]"
            )));
        }
        let full = self.ddim_timesteps(s_steps)?;
        let n = ((strength * s_steps as f64).floor() as usize).min(s_steps);
        // descending order; keep the n smallest timesteps (trailing steps)
        let substeps: Vec<usize> = full.iter().rev().copied().skip(s_steps - n).collect();
        Ok((substeps.first().copied(), substeps))
    }
}
