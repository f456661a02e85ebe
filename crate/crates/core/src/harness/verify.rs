//! Fast self-checks behind `icc verify`.

use std::sync::Arc;

use crate::cache::{fora_plan, single_step_error_probe, CacheMode};
use crate::calibration::plain_svd_calib;
use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::Engine;
use crate::harness::io::{decode, encode, weights_from_tensors, weights_to_tensors, DType};
use crate::model::{init_weights, LayerId, ModelConfig, Slot};
use crate::tensor::{thin_svd, truncate_factors, Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

fn svd_check() -> Result<Check> {
    let mut rng = Rng::new(7);
    let w = Matrix::randn(24, 16, 1.0, &mut rng);
    let f = thin_svd(&w)?;
    let err = f.reconstruct().max_abs_diff(&w)?;
    let mut worst = 0.0f64;
    for r in 0..=f.sigma.len() {
        let (a, b) = truncate_factors(&f, r)?;
        let e = w.sub(&a.matmul(&b)?)?.as_slice().iter().map(|v| v * v).sum::<f64>();
        let tail: f64 = f.sigma[r..].iter().map(|s| s * s).sum();
        worst = worst.max((e - tail).abs() / tail.max(1.0));
    }
    Ok(check(
        "svd",
        err < 1e-10 && worst < 1e-8,
        format!("reconstruction {err:.2e}, truncation residual {worst:.2e}"),
    ))
}

fn probe_check() -> Result<Check> {
    let cfg = ModelConfig::new(1, 16, 2, 8);
    let model = init_weights(&cfg, 3)?;
    let calib = plain_svd_calib(&model, 4)?;
    let layer = LayerId { block: 0, slot: Slot::FfnFc1 };
    let mut rng = Rng::new(11);
    let x_s = Matrix::randn(8, 16, 1.0, &mut rng);
    let x_m = Matrix::randn(8, 16, 1.0, &mut rng);
    let (measured, predicted) = single_step_error_probe(&model, layer, &calib, &x_s, &x_m)?;
    let rel = measured.max_abs_diff(&predicted)? / predicted.max_abs().max(1e-300);
    Ok(check("error-probe", rel < 1e-10, format!("relative {rel:.2e}")))
}

fn engine_checks() -> Result<Vec<Check>> {
    let mut config = ExperimentConfig {
        model: ModelConfig::new(2, 16, 2, 8),
        calib_size: 8,
        ..Default::default()
    };
    config.sampler.steps = 6;
    let engine = Engine::new(config)?;
    let oracle = engine.oracle(1)?;
    let full = Arc::new(plain_svd_calib(&engine.model, engine.model.config.min_layer_dim())?);
    let mut ctx = engine.context(CacheMode::Calibrated, 2, Some(full))?;
    let calibrated = engine.trajectory(&mut ctx, 1)?;
    let dev = calibrated.final_latent().max_abs_diff(oracle.final_latent())?;

    let zero = Arc::new(plain_svd_calib(&engine.model, 0)?);
    let mut ctx = engine.context(CacheMode::Calibrated, 2, Some(zero))?;
    let r0 = engine.trajectory(&mut ctx, 1)?;
    let mut ctx = engine.context(CacheMode::Naive, 2, None)?;
    let naive = engine.trajectory(&mut ctx, 1)?;
    let same = r0.final_latent() == naive.final_latent();

    let mut ledger_ok = true;
    for mode in [CacheMode::NoCache, CacheMode::Naive, CacheMode::Calibrated] {
        for p in [1, 2, 3] {
            let calib = (mode == CacheMode::Calibrated).then(|| Arc::new(plain_svd_calib(&engine.model, 4).unwrap()));
            ledger_ok &= engine.measure_macs(mode, p, calib)?.block_matches();
        }
    }
    Ok(vec![
        check("full-rank-exact", dev < 1e-9, format!("max |Δz| {dev:.2e}")),
        check("rank0-equals-naive", same, if same { "bit-identical" } else { "differs" }),
        check("ledger-vs-estimate", ledger_ok, "block MACs per mode × period"),
    ])
}

fn container_check() -> Result<Check> {
    let model = init_weights(&ModelConfig::new(1, 8, 2, 4), 5)?;
    let bytes = encode(&weights_to_tensors(&model, DType::F64));
    let back = weights_from_tensors(&decode(&bytes)?)?;
    let again = encode(&weights_to_tensors(&back, DType::F64));
    Ok(check("container", back == model && again == bytes, format!("{} bytes", bytes.len())))
}

fn plan_check() -> Result<Check> {
    let plan = fora_plan(5, 3, 2)?;
    let gathers: Vec<bool> = (0..5).map(|s| plan.is_gather(s, 0)).collect();
    let ok = gathers == [true, false, true, false, true];
    Ok(check("fora-plan", ok, format!("{gathers:?}")))
}

/// Runs every check; errors inside a check count as failures.
pub fn run_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, r: Result<Vec<Check>>| match r {
        Ok(c) => out.extend(c),
        Err(e) => out.push(check(name, false, e.to_string())),
    };
    push("svd", svd_check().map(|c| vec![c]));
    push("error-probe", probe_check().map(|c| vec![c]));
    push("fora-plan", plan_check().map(|c| vec![c]));
    push("container", container_check().map(|c| vec![c]));
    push("engine", engine_checks());
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_checks() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
