//! Gather/scatter cache plans and the per-step execution semantics of
//! no-cache, naive caching and increment-calibrated caching.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibParams;
use crate::error::{Error, Result};
use crate::ledger::{MacKind, MacLedger, Site};
use crate::model::{LayerId, Linear, LinearExecutor, LinearOutput, ModelWeights};
use crate::sampler::{NoiseSchedule, SamplerRun};
use crate::tensor::{Matrix, Rng};

/// Binary `steps × layers` gather matrix; scatter is its complement.
///
/// Rows are sampler step positions (0-based here), columns are layers in
/// [`LayerId::index`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachePlan {
    n_steps: usize,
    n_layers: usize,
    gather: Vec<bool>,
}

impl CachePlan {
    /// Validates that the first step gathers every layer, so no scatter can
    /// read an empty slot.
    pub fn from_gather(n_steps: usize, n_layers: usize, gather: Vec<bool>) -> Result<Self> {
        if gather.len() != n_steps * n_layers {
            return Err(Error::InvalidPlan(format!(
                "expected {} entries, got {}",
                n_steps * n_layers,
                gather.len()
            )));
        }
        if n_steps > 0 && !gather[..n_layers].iter().all(|&g| g) {
            return Err(Error::InvalidPlan("first step must gather every layer".into()));
        }
        Ok(Self {
            n_steps,
            n_layers,
            gather,
        })
    }

    pub fn all_gather(n_steps: usize, n_layers: usize) -> Self {
        Self {
            n_steps,
            n_layers,
            gather: vec![true; n_steps * n_layers],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn is_gather(&self, step: usize, layer: usize) -> bool {
        self.gather[step * self.n_layers + layer]
    }

    pub fn is_scatter(&self, step: usize, layer: usize) -> bool {
        !self.is_gather(step, layer)
    }

    pub fn gather_row(&self, step: usize) -> &[bool] {
        &self.gather[step * self.n_layers..(step + 1) * self.n_layers]
    }

    pub fn scatter_row(&self, step: usize) -> Vec<bool> {
        self.gather_row(step).iter().map(|g| !g).collect()
    }

    /// Number of steps on which layer 0 is fully computed.
    pub fn gather_steps(&self) -> usize {
        (0..self.n_steps).filter(|&s| self.is_gather(s, 0)).count()
    }
}

/// FORA pattern: every layer gathers at step positions `1, 1+p, 1+2p, …`
/// (1-based) and scatters everywhere else.
pub fn fora_plan(n_steps: usize, n_layers: usize, period: usize) -> Result<CachePlan> {
    if period == 0 {
        return Err(Error::InvalidPlan("period must be ≥ 1".into()));
    }
    let gather = (0..n_steps)
        .flat_map(|s| std::iter::repeat_n(s % period == 0, n_layers))
        .collect();
    CachePlan::from_gather(n_steps, n_layers, gather)
}

#[derive(Debug, Clone)]
pub struct CacheSlot {
    pub x: Matrix,
    pub y: Matrix,
    pub source_step: usize,
}

/// Stored `(input, output)` per layer and guidance branch.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    slots: HashMap<(usize, LayerId), CacheSlot>,
}

impl LayerCache {
    pub fn get(&self, branch: usize, layer: LayerId) -> Option<&CacheSlot> {
        self.slots.get(&(branch, layer))
    }

    pub fn store(&mut self, branch: usize, layer: LayerId, slot: CacheSlot) {
        self.slots.insert((branch, layer), slot);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, LayerId), &CacheSlot)> {
        self.slots.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    NoCache,
    Naive,
    Calibrated,
}

impl CacheMode {
    pub fn name(self) -> &'static str {
        match self {
            CacheMode::NoCache => "no_cache",
            CacheMode::Naive => "naive",
            CacheMode::Calibrated => "calibrated",
        }
    }
}

/// `Δx · wbᵀ · waᵀ`, the low-rank increment for an `N × C_i` input change.
pub fn low_rank_increment(wa: &Matrix, wb: &Matrix, dx: &Matrix) -> Result<Matrix> {
    dx.matmul_t(wb)?.matmul_t(wa)
}

/// State for one trajectory: mode, plan, cache, calibration and MAC ledger.
#[derive(Debug, Clone)]
pub struct ExecutionContext {
    mode: CacheMode,
    plan: CachePlan,
    cache: LayerCache,
    calib: Option<Arc<CalibParams>>,
    pub ledger: MacLedger,
    step: usize,
    branch: usize,
}

impl ExecutionContext {
    pub fn new(
        mode: CacheMode,
        plan: CachePlan,
        calib: Option<Arc<CalibParams>>,
        layers: &[LayerId],
    ) -> Result<Self> {
        if mode == CacheMode::Calibrated {
            let params = calib
                .as_ref()
                .ok_or_else(|| Error::MissingCalibration {
                    layer: "<all>".into(),
                })?;
            if let Some(missing) = layers.iter().find(|l| params.factors(**l).is_none()) {
                return Err(Error::MissingCalibration {
                    layer: missing.to_string(),
                });
            }
        }
        if plan.n_layers() != layers.len() {
            return Err(Error::InvalidPlan(format!(
                "plan has {} layers, model has {}",
                plan.n_layers(),
                layers.len()
            )));
        }
        Ok(Self {
            mode,
            plan,
            cache: LayerCache::default(),
            calib,
            ledger: MacLedger::new(),
            step: 0,
            branch: 0,
        })
    }

    pub fn no_cache(n_steps: usize, layers: &[LayerId]) -> Self {
        Self::new(
            CacheMode::NoCache,
            CachePlan::all_gather(n_steps, layers.len()),
            None,
            layers,
        )
        .expect("no-cache context is always valid")
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn plan(&self) -> &CachePlan {
        &self.plan
    }

    pub fn cache(&self) -> &LayerCache {
        &self.cache
    }

    pub fn calib(&self) -> Option<&CalibParams> {
        self.calib.as_deref()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Selects the sampler step position for subsequent layer calls.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    /// Selects the guidance branch (0 = conditional, 1 = unconditional).
    pub fn set_branch(&mut self, branch: usize) {
        self.branch = branch;
    }

    /// Clears cache and ledger, keeping mode, plan and calibration.
    pub fn reset(&mut self) {
        self.cache.clear();
        self.ledger.clear();
        self.step = 0;
        self.branch = 0;
    }

    fn scatters(&self, layer: LayerId) -> bool {
        self.mode != CacheMode::NoCache && self.plan.is_scatter(self.step, layer.index())
    }

    fn slot(&self, layer: LayerId) -> Result<&CacheSlot> {
        self.cache
            .get(self.branch, layer)
            .ok_or_else(|| Error::CacheMiss {
                layer: layer.to_string(),
                step: self.step,
            })
    }

    /// Evaluates one linear layer according to mode and plan.
    ///
    /// - gather (or no-cache): `y = F(x_now)`, cache refreshed;
    /// - naive scatter: `y = C(y)`;
    /// - calibrated scatter: `y = C(y) + Wa·Wb·(x_now − C(x))`.
    pub fn run_layer(&mut self, layer: LayerId, linear: &Linear, x_now: &Matrix) -> Result<LinearOutput> {
        let n = x_now.rows() as u64;
        if x_now.cols() != linear.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "run_layer",
                left: x_now.shape(),
                right: linear.weight.shape(),
            });
        }
        if !self.scatters(layer) {
            let y = linear.apply(x_now)?;
            self.ledger.record(
                self.step,
                Site::Layer(layer),
                MacKind::LinearFull,
                linear.macs(x_now.rows()),
            );
            if self.mode != CacheMode::NoCache {
                self.cache.store(
                    self.branch,
                    layer,
                    CacheSlot {
                        x: x_now.clone(),
                        y: y.clone(),
                        source_step: self.step,
                    },
                );
            }
            return Ok(LinearOutput { y, full: true });
        }

        let slot = self.slot(layer)?;
        match self.mode {
            CacheMode::Naive => Ok(LinearOutput {
                y: slot.y.clone(),
                full: false,
            }),
            CacheMode::Calibrated => {
                let params = self.calib.as_ref().expect("validated at construction");
                let pair = params.factors(layer).expect("validated at construction");
                let dx = x_now.sub(&slot.x)?;
                let mut y = slot.y.clone();
                y.add_assign(&low_rank_increment(&pair.wa, &pair.wb, &dx)?)?;
                let r = params.rank() as u64;
                let macs = n * (linear.in_dim() as u64 + linear.out_dim() as u64) * r;
                self.ledger
                    .record(self.step, Site::Layer(layer), MacKind::LinearIncrement, macs);
                Ok(LinearOutput { y, full: false })
            }
            CacheMode::NoCache => unreachable!(),
        }
    }
}

impl LinearExecutor for ExecutionContext {
    fn run_linear(&mut self, layer: LayerId, linear: &Linear, x: &Matrix) -> Result<LinearOutput> {
        self.run_layer(layer, linear, x)
    }

    fn reuse_output(&mut self, layer: LayerId) -> Result<Option<Matrix>> {
        if self.mode == CacheMode::Naive && self.scatters(layer) {
            return Ok(Some(self.slot(layer)?.y.clone()));
        }
        Ok(None)
    }

    fn charge(&mut self, site: Site, kind: MacKind, macs: u64) {
        self.ledger.record(self.step, site, kind, macs);
    }
}

/// Latents and noise predictions of one reverse run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Visited diffusion timesteps.
    pub timesteps: Vec<usize>,
    /// `latents[0]` is `z_T`; `latents[i + 1]` follows step position `i`.
    pub latents: Vec<Matrix>,
    /// Guided noise prediction at each step position.
    pub eps: Vec<Matrix>,
}

impl Trajectory {
    pub fn final_latent(&self) -> &Matrix {
        self.latents.last().expect("trajectory holds at least z_T")
    }
}

/// Full reverse loop from `z_T`. DDPM noise comes from `noise_seed`.
pub fn run_trajectory(
    model: &ModelWeights,
    sched: &NoiseSchedule,
    run: &SamplerRun,
    ctx: &mut ExecutionContext,
    z_start: &Matrix,
    cond: usize,
    noise_seed: u64,
) -> Result<Trajectory> {
    if ctx.plan().n_steps() != run.n_steps() {
        return Err(Error::InvalidPlan(format!(
            "plan has {} steps, sampler visits {}",
            ctx.plan().n_steps(),
            run.n_steps()
        )));
    }
    let mut rng = Rng::new(noise_seed);
    let mut z = z_start.clone();
    let mut latents = vec![z.clone()];
    let mut eps_all = Vec::with_capacity(run.n_steps());
    for (i, &t) in run.step_indices.iter().enumerate() {
        ctx.set_step(i);
        ctx.set_branch(0);
        let cond_eps = model.forward(&z, t, cond, ctx)?.eps;
        let eps = match run.guidance_scale {
            Some(scale) => {
                ctx.set_branch(1);
                let uncond = model.forward(&z, t, model.config.null_class(), ctx)?.eps;
                ctx.set_branch(0);
                let diff = cond_eps.sub(&uncond)?;
                uncond.add(&diff.scale(scale))?
            }
            None => cond_eps,
        };
        z = run.step(i, &z, &eps, sched, &mut rng)?;
        latents.push(z.clone());
        eps_all.push(eps);
    }
    Ok(Trajectory {
        timesteps: run.step_indices.clone(),
        latents,
        eps: eps_all,
    })
}

/// Measured vs predicted error of one calibrated scatter on `layer`.
///
/// `measured = F(x_m) − (F(x_s) + Wa·Wb·Δx)` and
/// `predicted = (W − Wa·Wb)·Δx`; they agree exactly up to rounding.
pub fn single_step_error_probe(
    model: &ModelWeights,
    layer: LayerId,
    calib: &CalibParams,
    x_s: &Matrix,
    x_m: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let linear = model.linear(layer);
    let pair = calib.factors(layer).ok_or_else(|| Error::MissingCalibration {
        layer: layer.to_string(),
    })?;
    let dx = x_m.sub(x_s)?;
    let mut approx = linear.apply(x_s)?;
    approx.add_assign(&low_rank_increment(&pair.wa, &pair.wb, &dx)?)?;
    let measured = linear.apply(x_m)?.sub(&approx)?;
    let residual = linear.weight.sub(&pair.wa.matmul(&pair.wb)?)?;
    let predicted = dx.matmul_t(&residual)?;
    Ok((measured, predicted))
}
