//! Analytic multiply-accumulate model for DiT-shaped networks.
//!
//! Per block and per forward pass with `N` tokens, width `d`, MLP ratio `m`:
//! - linear layers in full: `N·(4 + 2m)·d²` (`12·N·d²` for `m = 4`);
//! - attention `Q·Kᵀ` and `A·V`: `2·N²·d`;
//! - rank-`r` increments: `N·r·Σ(C_i + C_o) = N·r·(8 + 2m)·d` (`16·N·d·r`).
//!
//! A naive scatter step costs nothing inside the blocks. A calibrated
//! scatter step pays the increments plus full attention. Everything outside
//! the blocks is a per-forward overhead constant, doubled (like the blocks)
//! when classifier-free guidance runs a second branch.

use serde::{Deserialize, Serialize};

use crate::cache::CacheMode;
use crate::model::ModelConfig;

/// Fitted non-block overhead of DiT-XL/2 at 256×256 (embeddings, adaLN
/// modulation, final layer), chosen so that 40 DDIM steps with guidance cost
/// 9.49e12 MACs. See [`fit_overhead`].
pub const DIT_XL2_OVERHEAD_MACS: u64 = 244_963_904;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub depth: u64,
    pub hidden: u64,
    pub heads: u64,
    pub tokens: u64,
    pub mlp_ratio: u64,
    pub cfg_enabled: bool,
    pub overhead_macs_per_forward: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacEstimate {
    pub block: u64,
    pub overhead: u64,
    pub total: u64,
}

impl ArchSpec {
    /// DiT-XL/2, 256×256 latents (16 × 16 patches), guidance on.
    pub fn dit_xl_2() -> Self {
        Self {
            depth: 28,
            hidden: 1152,
            heads: 16,
            tokens: 256,
            mlp_ratio: 4,
            cfg_enabled: true,
            overhead_macs_per_forward: DIT_XL2_OVERHEAD_MACS,
        }
    }

    /// The toy model's shapes; its only non-block cost is the `d → d` head.
    pub fn from_model(cfg: &ModelConfig, cfg_enabled: bool) -> Self {
        let (n, d) = (cfg.tokens as u64, cfg.hidden as u64);
        Self {
            depth: cfg.depth as u64,
            hidden: d,
            heads: cfg.heads as u64,
            tokens: n,
            mlp_ratio: cfg.mlp_ratio as u64,
            cfg_enabled,
            overhead_macs_per_forward: n * d * d,
        }
    }

    pub fn linear_full_macs(&self) -> u64 {
        let d = self.hidden;
        self.depth * self.tokens * (4 + 2 * self.mlp_ratio) * d * d
    }

    pub fn attention_macs(&self) -> u64 {
        self.depth * 2 * self.tokens * self.tokens * self.hidden
    }

    pub fn increment_macs(&self, rank: u64) -> u64 {
        self.depth * self.tokens * rank * (8 + 2 * self.mlp_ratio) * self.hidden
    }

    /// Block MACs of a forward in which every layer gathers.
    pub fn full_forward_block(&self) -> u64 {
        self.linear_full_macs() + self.attention_macs()
    }

    /// Block MACs of a forward in which every layer scatters.
    pub fn cached_forward_block(&self, mode: CacheMode, rank: u64) -> u64 {
        match mode {
            CacheMode::NoCache => self.full_forward_block(),
            CacheMode::Naive => 0,
            CacheMode::Calibrated => self.increment_macs(rank) + self.attention_macs(),
        }
    }

    pub fn branches(&self) -> u64 {
        if self.cfg_enabled {
            2
        } else {
            1
        }
    }
}

/// Number of fully computed steps under a FORA plan with period `p`.
pub fn gather_steps(steps: u64, mode: CacheMode, period: u64) -> u64 {
    match mode {
        CacheMode::NoCache => steps,
        _ => steps.div_ceil(period.max(1)),
    }
}

/// Total MACs of a sampling run under a FORA plan.
pub fn estimate_macs(arch: &ArchSpec, steps: u64, mode: CacheMode, period: u64, rank: u64) -> MacEstimate {
    let full = gather_steps(steps, mode, period);
    let cached = steps - full;
    let b = arch.branches();
    let block = b * (full * arch.full_forward_block() + cached * arch.cached_forward_block(mode, rank));
    let overhead = b * steps * arch.overhead_macs_per_forward;
    MacEstimate {
        block,
        overhead,
        total: block + overhead,
    }
}

/// Per-forward overhead that makes a no-cache run of `steps` steps cost
/// `target_total` MACs.
pub fn fit_overhead(arch: &ArchSpec, steps: u64, target_total: f64) -> u64 {
    let per_forward = target_total / (steps * arch.branches()) as f64;
    (per_forward - arch.full_forward_block() as f64).round() as u64
}

/// Formats MACs in units of 10¹² with two decimals.
pub fn tera(macs: u64) -> f64 {
    macs as f64 / 1e12
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_full_forward_closed_form() {
        let arch = ArchSpec::from_model(&ModelConfig::new(2, 32, 4, 16), false);
        assert_eq!(arch.full_forward_block(), 2 * (12 * 32 * 32 * 16 + 2 * 16 * 16 * 32));
        assert_eq!(arch.full_forward_block(), 425_984);
    }

    #[test]
    fn overhead_fit_is_stable() {
        let mut arch = ArchSpec::dit_xl_2();
        arch.overhead_macs_per_forward = 0;
        assert_eq!(fit_overhead(&arch, 40, 9.49e12), DIT_XL2_OVERHEAD_MACS);
    }

    #[test]
    fn dit_no_cache_rows() {
        let arch = ArchSpec::dit_xl_2();
        for (steps, want) in [(40, 9.49), (30, 7.12), (20, 4.75), (10, 2.37)] {
            let got = tera(estimate_macs(&arch, steps, CacheMode::NoCache, 1, 0).total);
            assert!((got - want).abs() / want < 0.02, "{steps}: {got}");
        }
    }

    #[test]
    fn increment_is_sixteen_d_for_ratio_four() {
        let arch = ArchSpec::dit_xl_2();
        assert_eq!(arch.increment_macs(1), 28 * 256 * 16 * 1152);
    }

    #[test]
    fn period_one_matches_no_cache() {
        let arch = ArchSpec::dit_xl_2();
        let a = estimate_macs(&arch, 17, CacheMode::NoCache, 1, 0);
        for mode in [CacheMode::Naive, CacheMode::Calibrated] {
            assert_eq!(estimate_macs(&arch, 17, mode, 1, 64), a);
        }
    }
}
