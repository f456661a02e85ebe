//! Wiring from an [`ExperimentConfig`] to trajectories, MAC checks and
//! reports.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::cache::{fora_plan, run_trajectory, CacheMode, ExecutionContext, Trajectory};
use crate::calibration::{
    ca_svd_scales, cd_svd_scales, channel_aware_calib, plain_svd_calib, reduce_set, CalibMethod,
    CalibParams, CalibSet, ScaleSet, ScaleSide,
};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::divergence::{summarize, trajectory_divergence};
use crate::harness::io::{calib_from_tensors, load_tensors, weights_from_tensors};
use crate::harness::macs::{estimate_macs, ArchSpec, MacEstimate};
use crate::harness::report::{MacSummary, Report, RunReport};
use crate::ledger::{MacKind, MacLedger};
use crate::model::{init_weights, ModelWeights};
use crate::sampler::{NoiseSchedule, SamplerRun};
use crate::tensor::{Matrix, Rng};

/// Environment variable that overrides the worker-thread count.
pub const THREADS_ENV: &str = "ICC_THREADS";

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mode: CacheMode,
    pub period: usize,
    pub rank: Option<usize>,
    pub method: Option<CalibMethod>,
}

impl Cell {
    pub fn label(&self) -> String {
        match self.mode {
            CacheMode::NoCache => "no_cache".into(),
            CacheMode::Naive => format!("naive/p{}", self.period),
            CacheMode::Calibrated => format!(
                "calibrated/{}/r{}/p{}",
                self.method.map_or("?", |m| m.tag()),
                self.rank.unwrap_or(0),
                self.period
            ),
        }
    }
}

/// Analytic vs measured MACs of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MacCheck {
    pub estimated: MacEstimate,
    pub ledger: MacLedger,
}

impl MacCheck {
    pub fn block_matches(&self) -> bool {
        self.estimated.block == self.ledger.block_total()
    }
}

/// A configured model, schedule and sampler.
pub struct Engine {
    pub config: ExperimentConfig,
    pub model: ModelWeights,
    pub sched: NoiseSchedule,
    pub run: SamplerRun,
}

impl Engine {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = match &config.weights_path {
            Some(p) => {
                let w = weights_from_tensors(&load_tensors(p)?)?;
                if w.config != config.model {
                    return Err(Error::Config(format!(
                        "weights in {} were built for {:?}, config says {:?}",
                        p.display(),
                        w.config,
                        config.model
                    )));
                }
                w
            }
            None => init_weights(&config.model, config.seeds.weights)?,
        };
        Self::with_model(config, model)
    }

    pub fn with_model(config: ExperimentConfig, model: ModelWeights) -> Result<Self> {
        config.validate()?;
        let sched = config.schedule.build()?;
        let run = config.sampler_run(&sched)?;
        Ok(Self {
            config,
            model,
            sched,
            run,
        })
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec::from_model(&self.model.config, self.run.guidance_scale.is_some())
    }

    /// `z_T` for a sampling seed.
    pub fn initial_latent(&self, seed: u64) -> Matrix {
        let mut rng = Rng::fork(seed, 0);
        Matrix::randn(self.model.config.tokens, self.model.config.hidden, 1.0, &mut rng)
    }

    fn noise_seed(seed: u64) -> u64 {
        Rng::fork(seed, 1).next_u64()
    }

    pub fn calib_set(&self) -> CalibSet {
        let seed = Rng::fork(self.config.seeds.calib, 0).next_u64();
        CalibSet::synthetic(&self.model.config, self.config.calib_size, seed)
    }

    fn scale_seed(&self) -> u64 {
        Rng::fork(self.config.seeds.calib, 1).next_u64()
    }

    /// Per-layer scales for a channel-aware method.
    pub fn scales(&self, method: CalibMethod) -> Result<Option<ScaleSet>> {
        let set = self.calib_set();
        let seed = self.scale_seed();
        Ok(match method {
            CalibMethod::Svd => None,
            CalibMethod::CaSvd => Some(ca_svd_scales(&self.model, &set, &self.sched, seed)?),
            CalibMethod::CdSvd => Some(cd_svd_scales(&self.model, &set, &self.sched, seed)?),
            CalibMethod::CdSvdInput => Some(reduce_set(
                &cd_svd_scales(&self.model, &set, &self.sched, seed)?,
                ScaleSide::InputOnly,
            )),
            CalibMethod::CdSvdOutput => Some(reduce_set(
                &cd_svd_scales(&self.model, &set, &self.sched, seed)?,
                ScaleSide::OutputOnly,
            )),
        })
    }

    fn calib_from_scales(&self, method: CalibMethod, scales: Option<&ScaleSet>, rank: usize) -> Result<CalibParams> {
        match scales {
            None => plain_svd_calib(&self.model, rank),
            Some(s) => channel_aware_calib(&self.model, s, rank, method),
        }
    }

    /// Calibration parameters, loaded from `calib_path` when it matches.
    pub fn calibrate(&self, method: CalibMethod, rank: usize) -> Result<CalibParams> {
        if let Some(p) = &self.config.calib_path {
            let c = calib_from_tensors(&load_tensors(p)?)?;
            if c.method() == method && c.rank() == rank {
                return Ok(c);
            }
        }
        let scales = self.scales(method)?;
        self.calib_from_scales(method, scales.as_ref(), rank)
    }

    pub fn context(&self, mode: CacheMode, period: usize, calib: Option<Arc<CalibParams>>) -> Result<ExecutionContext> {
        let layers = self.model.config.linear_layers();
        let plan = fora_plan(self.run.n_steps(), layers.len(), period)?;
        ExecutionContext::new(mode, plan, calib, &layers)
    }

    pub fn trajectory(&self, ctx: &mut ExecutionContext, seed: u64) -> Result<Trajectory> {
        ctx.reset();
        run_trajectory(
            &self.model,
            &self.sched,
            &self.run,
            ctx,
            &self.initial_latent(seed),
            self.config.class_label,
            Self::noise_seed(seed),
        )
    }

    pub fn oracle(&self, seed: u64) -> Result<Trajectory> {
        let layers = self.model.config.linear_layers();
        let mut ctx = ExecutionContext::no_cache(self.run.n_steps(), &layers);
        self.trajectory(&mut ctx, seed)
    }

    pub fn estimate(&self, mode: CacheMode, period: usize, rank: usize) -> MacEstimate {
        estimate_macs(
            &self.arch(),
            self.run.n_steps() as u64,
            mode,
            period as u64,
            rank as u64,
        )
    }

    /// Runs one trajectory with a ledger and returns it next to the formula.
    pub fn measure_macs(&self, mode: CacheMode, period: usize, calib: Option<Arc<CalibParams>>) -> Result<MacCheck> {
        let rank = calib.as_ref().map_or(0, |c| c.rank());
        let mut ctx = self.context(mode, period, calib)?;
        self.trajectory(&mut ctx, self.config.seeds.sample)?;
        Ok(MacCheck {
            estimated: self.estimate(mode, period, rank),
            ledger: ctx.ledger.clone(),
        })
    }

    fn run_cell(&self, cell: &Cell, calib: Option<Arc<CalibParams>>, oracles: &[(u64, Trajectory)]) -> Result<RunReport> {
        let start = Instant::now();
        let mut ctx = self.context(cell.mode, cell.period, calib)?;
        let mut divergences = Vec::with_capacity(oracles.len());
        let mut ledger = None;
        for (seed, oracle) in oracles {
            let traj = self.trajectory(&mut ctx, *seed)?;
            divergences.push(trajectory_divergence(&traj, oracle)?);
            ledger.get_or_insert_with(|| ctx.ledger.clone());
        }
        let ledger = ledger.unwrap_or_default();
        let estimated = self.estimate(cell.mode, cell.period, cell.rank.unwrap_or(0));
        let by_kind: BTreeMap<MacKind, u64> = [
            MacKind::LinearFull,
            MacKind::LinearIncrement,
            MacKind::AttentionNonlinear,
            MacKind::Overhead,
        ]
        .into_iter()
        .map(|k| (k, ledger.total_kind(k)))
        .collect();
        Ok(RunReport {
            label: cell.label(),
            mode: cell.mode,
            period: cell.period,
            rank: cell.rank,
            method: cell.method,
            seeds: oracles.iter().map(|(s, _)| *s).collect(),
            macs: MacSummary {
                measured_total: ledger.total(),
                measured_block: ledger.block_total(),
                measured_overhead: ledger.total_kind(MacKind::Overhead),
                by_kind,
                estimated,
                block_estimate_matches: estimated.block == ledger.block_total(),
            },
            divergence: summarize(&divergences),
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn oracles(&self) -> Result<Vec<(u64, Trajectory)>> {
        self.config
            .seeds
            .sample_seeds()
            .into_par_iter()
            .map(|s| Ok((s, self.oracle(s)?)))
            .collect()
    }

    /// The configured run over every sampling seed, plus its trajectories.
    pub fn sample(&self) -> Result<(Report, Vec<Trajectory>)> {
        let c = &self.config;
        let cell = Cell {
            mode: c.mode,
            period: c.period,
            rank: (c.mode == CacheMode::Calibrated).then(|| c.rank.unwrap_or(0)),
            method: (c.mode == CacheMode::Calibrated).then(|| c.method.unwrap_or(CalibMethod::Svd)),
        };
        let calib = match (cell.method, cell.rank) {
            (Some(m), Some(r)) => Some(Arc::new(self.calibrate(m, r)?)),
            _ => None,
        };
        let oracles = self.oracles()?;
        let mut ctx = self.context(cell.mode, cell.period, calib.clone())?;
        let trajectories = oracles
            .iter()
            .map(|(s, _)| self.trajectory(&mut ctx, *s))
            .collect::<Result<Vec<_>>>()?;
        let report = self.run_cell(&cell, calib, &oracles)?;
        Ok((Report::new("sample", c.clone(), vec![report]), trajectories))
    }

    pub fn bench_cells(&self) -> Vec<Cell> {
        let b = &self.config.bench;
        let mut cells = Vec::new();
        for &mode in &b.modes {
            match mode {
                CacheMode::NoCache => cells.push(Cell {
                    mode,
                    period: 1,
                    rank: None,
                    method: None,
                }),
                CacheMode::Naive => cells.extend(b.periods.iter().map(|&p| Cell {
                    mode,
                    period: p,
                    rank: None,
                    method: None,
                })),
                CacheMode::Calibrated => {
                    for &m in &b.methods {
                        for &r in &b.ranks {
                            for &p in &b.periods {
                                cells.push(Cell {
                                    mode,
                                    period: p,
                                    rank: Some(r),
                                    method: Some(m),
                                });
                            }
                        }
                    }
                }
            }
        }
        cells
    }

    /// Sweeps the bench grid. Cells run in parallel; output order is the
    /// grid order regardless of scheduling.
    pub fn bench(&self) -> Result<Report> {
        let cells = self.bench_cells();
        let max_rank = self.model.config.min_layer_dim();
        let mut calibs: BTreeMap<(CalibMethod, usize), Arc<CalibParams>> = BTreeMap::new();
        for &m in &self.config.bench.methods {
            if !cells.iter().any(|c| c.method == Some(m)) {
                continue;
            }
            let scales = self.scales(m)?;
            for &r in &self.config.bench.ranks {
                if r > max_rank {
                    return Err(Error::Config(format!("bench rank {r} exceeds min layer dim {max_rank}")));
                }
                calibs.insert((m, r), Arc::new(self.calib_from_scales(m, scales.as_ref(), r)?));
            }
        }
        let oracles = self.oracles()?;
        let runs = cells
            .par_iter()
            .map(|cell| {
                let calib = match (cell.method, cell.rank) {
                    (Some(m), Some(r)) => Some(calibs[&(m, r)].clone()),
                    _ => None,
                };
                self.run_cell(cell, calib, &oracles)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Report::new("bench", self.config.clone(), runs))
    }
}

/// Builds a global rayon pool from [`THREADS_ENV`] if it is set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}
