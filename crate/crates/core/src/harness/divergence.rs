//! Per-step distance of a cached trajectory from its no-cache oracle.

use serde::{Deserialize, Serialize};

use crate::cache::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDivergence {
    pub position: usize,
    pub t: usize,
    pub eps_mse: f64,
    pub eps_max_abs: f64,
    pub latent_mse: f64,
    pub latent_max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub per_step: Vec<StepDivergence>,
    pub final_latent_mse: f64,
    pub final_latent_max_abs: f64,
}

pub fn trajectory_divergence(run: &Trajectory, oracle: &Trajectory) -> Result<Divergence> {
    if run.timesteps != oracle.timesteps {
        return Err(Error::Mismatch(format!(
            "timesteps differ: {:?} vs {:?}",
            run.timesteps, oracle.timesteps
        )));
    }
    let mut per_step = Vec::with_capacity(run.eps.len());
    for (i, &t) in run.timesteps.iter().enumerate() {
        let de = run.eps[i].sub(&oracle.eps[i])?;
        let dz = run.latents[i + 1].sub(&oracle.latents[i + 1])?;
        per_step.push(StepDivergence {
            position: i,
            t,
            eps_mse: de.mean_squared(),
            eps_max_abs: de.max_abs(),
            latent_mse: dz.mean_squared(),
            latent_max_abs: dz.max_abs(),
        });
    }
    let last = run.final_latent().sub(oracle.final_latent())?;
    Ok(Divergence {
        per_step,
        final_latent_mse: last.mean_squared(),
        final_latent_max_abs: last.max_abs(),
    })
}

/// Statistics over a batch of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub seeds: usize,
    pub final_mse_mean: f64,
    pub final_mse_std: f64,
    pub final_mse_max: f64,
    pub final_max_abs_max: f64,
    pub eps_mse_mean_per_step: Vec<f64>,
    pub latent_mse_mean_per_step: Vec<f64>,
}

pub fn summarize(batch: &[Divergence]) -> DivergenceSummary {
    let n = batch.len().max(1) as f64;
    let finals: Vec<f64> = batch.iter().map(|d| d.final_latent_mse).collect();
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let steps = batch.first().map_or(0, |d| d.per_step.len());
    let per_step = |f: fn(&StepDivergence) -> f64| -> Vec<f64> {
        (0..steps)
            .map(|i| batch.iter().map(|d| f(&d.per_step[i])).sum::<f64>() / n)
            .collect()
    };
    DivergenceSummary {
        seeds: batch.len(),
        final_mse_mean: mean,
        final_mse_std: var.sqrt(),
        final_mse_max: finals.iter().cloned().fold(0.0, f64::max),
        final_max_abs_max: batch.iter().map(|d| d.final_latent_max_abs).fold(0.0, f64::max),
        eps_mse_mean_per_step: per_step(|s| s.eps_mse),
        latent_mse_mean_per_step: per_step(|s| s.latent_mse),
    }
}
