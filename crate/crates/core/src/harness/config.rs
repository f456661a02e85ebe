//! Experiment configuration, read from TOML and overridable by CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::CacheMode;
use crate::calibration::{CalibMethod, DEFAULT_CALIB_SIZE};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::{make_linear_schedule, NoiseSchedule, SamplerKind, SamplerRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Number of diffusion timesteps `T`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Classifier-free guidance scale; absent disables the second branch.
    pub guidance_scale: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 20,
            guidance_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub weights: u64,
    pub calib: u64,
    /// First sampling seed; runs use `sample, sample + 1, …`.
    pub sample: u64,
    /// Number of sampling seeds.
    pub count: usize,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            weights: 0,
            calib: 1,
            sample: 100,
            count: 1,
        }
    }
}

impl SeedConfig {
    pub fn sample_seeds(&self) -> Vec<u64> {
        (0..self.count as u64).map(|i| self.sample + i).collect()
    }
}

/// Grid swept by `bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub modes: Vec<CacheMode>,
    pub periods: Vec<usize>,
    pub ranks: Vec<usize>,
    pub methods: Vec<CalibMethod>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: vec![CacheMode::NoCache, CacheMode::Naive, CacheMode::Calibrated],
            periods: vec![2, 3],
            ranks: vec![0, 16, 64],
            methods: vec![CalibMethod::Svd],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub mode: CacheMode,
    pub period: usize,
    pub rank: Option<usize>,
    pub method: Option<CalibMethod>,
    pub calib_size: usize,
    pub class_label: usize,
    pub seeds: SeedConfig,
    pub weights_path: Option<PathBuf>,
    pub calib_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            mode: CacheMode::Calibrated,
            period: 2,
            rank: Some(16),
            method: Some(CalibMethod::Svd),
            calib_size: DEFAULT_CALIB_SIZE,
            class_label: 0,
            seeds: SeedConfig::default(),
            weights_path: None,
            calib_path: None,
            output_dir: None,
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let sched = self.schedule.build()?;
        if self.sampler.steps == 0 || self.sampler.steps > sched.steps() {
            return Err(Error::Config(format!(
                "sampler.steps must be in [1, {}], got {}",
                sched.steps(),
                self.sampler.steps
            )));
        }
        if self.period == 0 {
            return Err(Error::Config("period must be ≥ 1".into()));
        }
        if self.class_label >= self.model.cond_classes {
            return Err(Error::Config(format!(
                "class_label {} out of range [0, {})",
                self.class_label, self.model.cond_classes
            )));
        }
        if self.seeds.count == 0 {
            return Err(Error::Config("seeds.count must be ≥ 1".into()));
        }
        if self.mode == CacheMode::Calibrated {
            let rank = self
                .rank
                .ok_or_else(|| Error::Config("calibrated mode needs a rank".into()))?;
            if self.method.is_none() {
                return Err(Error::Config("calibrated mode needs a method".into()));
            }
            let max = self.model.min_layer_dim();
            if rank > max {
                return Err(Error::Config(format!("rank {rank} exceeds min layer dim {max}")));
            }
        }
        if self.calib_size == 0 {
            return Err(Error::Config("calib_size must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn sampler_run(&self, sched: &NoiseSchedule) -> Result<SamplerRun> {
        SamplerRun::new(
            self.sampler.kind,
            sched,
            self.sampler.steps,
            self.sampler.guidance_scale,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = ExperimentConfig::from_toml_str(
            r#"
            mode = "naive"
            period = 3
            [model]
            depth = 2
            hidden = 32
            [sampler]
            kind = "ddpm"
            steps = 10
            guidance_scale = 1.5
            "#,
        )
        .unwrap();
        assert_eq!(c.mode, CacheMode::Naive);
        assert_eq!(c.model.depth, 2);
        assert_eq!(c.model.heads, 4);
        assert_eq!(c.sampler.guidance_scale, Some(1.5));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        let c = ExperimentConfig {
            rank: None,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            rank: Some(65),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.sampler.steps = 51;
        assert!(c.validate().is_err());
    }
}
