//! Noise schedules, forward noising and DDPM / DDIM reverse updates.
//!
//! Timesteps are 1-based (`t ∈ [1, T]`); `ᾱ_0` is defined as 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::InvalidSchedule("need at least 2 timesteps".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// DDPM posterior standard deviation; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// β linearly spaced over `[beta_start, beta_end]`, endpoints inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidSchedule(format!("T = {steps} < 2")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start ≤ beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let span = beta_end - beta_start;
    let betas = (0..steps)
        .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·eps`
pub fn forward_noising(z0: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let scaled = z0.scale(a);
    scaled.add(&eps.scale(b))
}

/// DDPM update from `t` to `t_prev` (< t). For `t_prev = t − 1` this is the
/// textbook step; larger gaps use the respaced per-step `α = ᾱ_t / ᾱ_prev`.
pub fn ddpm_step_to(
    z_t: &Matrix,
    eps_hat: &Matrix,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Matrix> {
    sched.check(t)?;
    if t_prev >= t {
        return Err(Error::StepOutOfRange {
            t: t_prev,
            lo: 0,
            hi: t - 1,
        });
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    let sigma = if t_prev == t - 1 {
        sched.sigma(t)
    } else {
        (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
    };
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out = Matrix::zeros(z_t.rows(), z_t.cols());
    let zs = z_t.as_slice();
    let es = eps_hat.as_slice();
    if zs.len() != es.len() {
        return Err(Error::ShapeMismatch {
            op: "ddpm_step",
            left: z_t.shape(),
            right: eps_hat.shape(),
        });
    }
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        let noise = if sigma > 0.0 { sigma * rng.gauss() } else { 0.0 };
        *o = inv * (zs[i] - coef * es[i]) + noise;
    }
    Ok(out)
}

/// One DDPM step `t → t−1`.
pub fn ddpm_step(
    z_t: &Matrix,
    eps_hat: &Matrix,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Matrix> {
    ddpm_step_to(z_t, eps_hat, t, t - 1, sched, rng)
}

/// Predicted clean sample `ẑ0 = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_z0(z_t: &Matrix, eps_hat: &Matrix, t: usize, sched: &NoiseSchedule) -> Result<Matrix> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    z_t.sub(&eps_hat.scale((1.0 - ab).sqrt()))
        .map(|m| m.scale(1.0 / ab.sqrt()))
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    z_t: &Matrix,
    eps_hat: &Matrix,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    if t_prev >= t {
        return Err(Error::StepOutOfRange {
            t: t_prev,
            lo: 0,
            hi: t.saturating_sub(1),
        });
    }
    let z0 = predict_z0(z_t, eps_hat, t, sched)?;
    let ab_prev = sched.alpha_bar(t_prev);
    z0.scale(ab_prev.sqrt())
        .add(&eps_hat.scale((1.0 - ab_prev).sqrt()))
}

/// Uniform-stride descending timesteps from `T` to 1:
/// `t_i = T − round(i·(T−1)/(n−1))`, halves rounded up. `n = 1` gives `[T]`.
pub fn make_step_indices(total: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > total {
        return Err(Error::InvalidSchedule(format!(
            "need 1 ≤ n_steps ≤ T, got n_steps = {n_steps}, T = {total}"
        )));
    }
    if n_steps == 1 {
        return Ok(vec![total]);
    }
    let span = total - 1;
    let denom = n_steps - 1;
    Ok((0..n_steps)
        .map(|i| total - (2 * i * span + denom) / (2 * denom))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerRun {
    pub kind: SamplerKind,
    /// Strictly decreasing diffusion timesteps visited.
    pub step_indices: Vec<usize>,
    /// Classifier-free guidance scale; `None` disables the uncond branch.
    pub guidance_scale: Option<f64>,
}

impl SamplerRun {
    pub fn new(
        kind: SamplerKind,
        sched: &NoiseSchedule,
        n_steps: usize,
        guidance_scale: Option<f64>,
    ) -> Result<Self> {
        Ok(Self {
            kind,
            step_indices: make_step_indices(sched.steps(), n_steps)?,
            guidance_scale,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.step_indices.len()
    }

    /// Target timestep after position `i` (0 after the last one).
    pub fn prev_index(&self, i: usize) -> usize {
        self.step_indices.get(i + 1).copied().unwrap_or(0)
    }

    /// Applies the configured update rule for step position `i`.
    pub fn step(
        &self,
        i: usize,
        z_t: &Matrix,
        eps_hat: &Matrix,
        sched: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Matrix> {
        let t = self.step_indices[i];
        let t_prev = self.prev_index(i);
        match self.kind {
            SamplerKind::Ddim => ddim_step(z_t, eps_hat, t, t_prev, sched),
            SamplerKind::Ddpm => ddpm_step_to(z_t, eps_hat, t, t_prev, sched, rng),
        }
    }
}
