//! Calibration parameters from the model's own weights.
//!
//! Every block linear layer `W (C_o × C_i)` gets a rank-`r` factor pair
//! `(Wa, Wb)` with `Wa·Wb ≈ W`. Plain SVD truncates `W` directly. The
//! channel-aware variants truncate `W' = S_o·W·S_i` and undo the scaling
//! afterwards, so that channels with large activations (CA) or large
//! step-to-step activation changes (CD) are reconstructed more accurately.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Exact, LayerId, ModelConfig, ModelWeights, TapRecord};
use crate::sampler::{ddim_step, forward_noising, NoiseSchedule};
use crate::tensor::{thin_svd, truncate_factors, Matrix, Rng};

/// Lower bound applied to every scale entry before it is inverted.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Default calibration-set size.
pub const DEFAULT_CALIB_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMethod {
    Identity,
    Ca,
    Cd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSide {
    Both,
    InputOnly,
    OutputOnly,
}

/// Diagonal input/output channel scales for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePair {
    pub s_i: Vec<f64>,
    pub s_o: Vec<f64>,
    pub method: ScaleMethod,
    pub side: ScaleSide,
}

impl ScalePair {
    pub fn identity(c_o: usize, c_i: usize) -> Self {
        Self {
            s_i: vec![1.0; c_i],
            s_o: vec![1.0; c_o],
            method: ScaleMethod::Identity,
            side: ScaleSide::Both,
        }
    }

    fn check(&self, layer: LayerId) -> Result<()> {
        if let Some(&v) = self
            .s_i
            .iter()
            .chain(&self.s_o)
            .find(|v| !(v.is_finite() && **v >= SCALE_FLOOR))
        {
            return Err(Error::ScaleBelowFloor {
                layer: layer.to_string(),
                value: v,
            });
        }
        Ok(())
    }
}

pub type ScaleSet = BTreeMap<LayerId, ScalePair>;

/// Which calibration recipe produced a [`CalibParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CalibMethod {
    #[serde(rename = "svd")]
    Svd,
    #[serde(rename = "ca-svd")]
    CaSvd,
    #[serde(rename = "cd-svd")]
    CdSvd,
    #[serde(rename = "cd-svd-i")]
    CdSvdInput,
    #[serde(rename = "cd-svd-o")]
    CdSvdOutput,
}

impl CalibMethod {
    pub const ALL: [CalibMethod; 5] = [
        CalibMethod::Svd,
        CalibMethod::CaSvd,
        CalibMethod::CdSvd,
        CalibMethod::CdSvdInput,
        CalibMethod::CdSvdOutput,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            CalibMethod::Svd => "svd",
            CalibMethod::CaSvd => "ca-svd",
            CalibMethod::CdSvd => "cd-svd",
            CalibMethod::CdSvdInput => "cd-svd-i",
            CalibMethod::CdSvdOutput => "cd-svd-o",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for CalibMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CalibMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown calibration method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    /// `C_o × r`
    pub wa: Matrix,
    /// `r × C_i`
    pub wb: Matrix,
}

impl FactorPair {
    pub fn product(&self) -> Matrix {
        self.wa.matmul(&self.wb).expect("factor shapes agree")
    }
}

/// Rank-`r` factors for every block linear layer, with one rank for all.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibParams {
    rank: usize,
    method: CalibMethod,
    factors: BTreeMap<LayerId, FactorPair>,
}

impl CalibParams {
    pub fn new(rank: usize, method: CalibMethod, factors: BTreeMap<LayerId, FactorPair>) -> Result<Self> {
        for (id, pair) in &factors {
            if pair.wa.cols() != rank || pair.wb.rows() != rank {
                return Err(Error::RankOutOfRange {
                    rank: pair.wa.cols(),
                    max: rank,
                    layer: Some(id.to_string()),
                });
            }
            if !(pair.wa.is_finite() && pair.wb.is_finite()) {
                return Err(Error::NonFinite {
                    layer: id.to_string(),
                });
            }
        }
        Ok(Self {
            rank,
            method,
            factors,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn method(&self) -> CalibMethod {
        self.method
    }

    pub fn factors(&self, layer: LayerId) -> Option<&FactorPair> {
        self.factors.get(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &FactorPair)> {
        self.factors.iter()
    }
}

/// Clean samples used to estimate channel statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    pub samples: Vec<Matrix>,
    /// Seed the samples were drawn from, if synthetic.
    pub seed: Option<u64>,
}

impl CalibSet {
    /// Standard-normal `N × d` samples from `seed`.
    pub fn synthetic(config: &ModelConfig, size: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let samples = (0..size)
            .map(|_| Matrix::randn(config.tokens, config.hidden, 1.0, &mut rng))
            .collect();
        Self {
            samples,
            seed: Some(seed),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyCalibrationSet);
        }
        let want = (config.tokens, config.hidden);
        if let Some(bad) = self.samples.iter().find(|s| s.shape() != want) {
            return Err(Error::ShapeMismatch {
                op: "calibration sample",
                left: bad.shape(),
                right: want,
            });
        }
        Ok(())
    }
}

fn check_rank(layer: LayerId, w: &Matrix, r: usize) -> Result<()> {
    let max = w.rows().min(w.cols());
    if r > max {
        return Err(Error::RankOutOfRange {
            rank: r,
            max,
            layer: Some(layer.to_string()),
        });
    }
    Ok(())
}

/// Truncated SVD of `w` split as `U_r√Σ_r · √Σ_rV_rᵀ`.
pub fn plain_factors(w: &Matrix, r: usize) -> Result<FactorPair> {
    let f = thin_svd(w)?;
    let (wa, wb) = truncate_factors(&f, r)?;
    Ok(FactorPair { wa, wb })
}

/// Factors of `S_o⁻¹ · trunc_r(S_o·W·S_i) · S_i⁻¹`.
pub fn channel_aware_factors(w: &Matrix, s_i: &[f64], s_o: &[f64], r: usize) -> Result<FactorPair> {
    if s_i.len() != w.cols() || s_o.len() != w.rows() {
        return Err(Error::ShapeMismatch {
            op: "channel scales",
            left: w.shape(),
            right: (s_o.len(), s_i.len()),
        });
    }
    let scaled = w.scale_rows(s_o).scale_cols(s_i);
    let FactorPair { wa, wb } = plain_factors(&scaled, r)?;
    let inv_o: Vec<f64> = s_o.iter().map(|s| 1.0 / s).collect();
    let inv_i: Vec<f64> = s_i.iter().map(|s| 1.0 / s).collect();
    Ok(FactorPair {
        wa: wa.scale_rows(&inv_o),
        wb: wb.scale_cols(&inv_i),
    })
}

pub fn plain_svd_calib(weights: &ModelWeights, r: usize) -> Result<CalibParams> {
    let mut factors = BTreeMap::new();
    for id in weights.config.linear_layers() {
        let w = &weights.linear(id).weight;
        check_rank(id, w, r)?;
        factors.insert(id, plain_factors(w, r)?);
    }
    CalibParams::new(r, CalibMethod::Svd, factors)
}

/// Channel-aware calibration with the given per-layer scales.
pub fn channel_aware_calib(
    weights: &ModelWeights,
    scales: &ScaleSet,
    r: usize,
    method: CalibMethod,
) -> Result<CalibParams> {
    let mut factors = BTreeMap::new();
    for id in weights.config.linear_layers() {
        let w = &weights.linear(id).weight;
        check_rank(id, w, r)?;
        let pair = scales.get(&id).ok_or_else(|| Error::MissingCalibration {
            layer: id.to_string(),
        })?;
        pair.check(id)?;
        factors.insert(id, channel_aware_factors(w, &pair.s_i, &pair.s_o, r)?);
    }
    CalibParams::new(r, method, factors)
}

/// Replaces the non-selected side with ones.
pub fn reduced_variants(scales: &ScalePair, which: ScaleSide) -> ScalePair {
    let mut out = scales.clone();
    match which {
        ScaleSide::Both => {}
        ScaleSide::InputOnly => out.s_o.iter_mut().for_each(|v| *v = 1.0),
        ScaleSide::OutputOnly => out.s_i.iter_mut().for_each(|v| *v = 1.0),
    }
    out.side = match (scales.side, which) {
        (s, ScaleSide::Both) => s,
        (ScaleSide::Both, w) => w,
        (s, w) if s == w => s,
        // Input-only then output-only (or vice versa) leaves nothing scaled.
        _ => {
            out.method = ScaleMethod::Identity;
            ScaleSide::Both
        }
    };
    out
}

pub fn reduce_set(scales: &ScaleSet, which: ScaleSide) -> ScaleSet {
    scales
        .iter()
        .map(|(id, p)| (*id, reduced_variants(p, which)))
        .collect()
}

/// Running per-channel sums of absolute values (or absolute differences).
#[derive(Debug, Clone, Default)]
pub struct ChannelAccumulator {
    sums_in: BTreeMap<LayerId, Vec<f64>>,
    sums_out: BTreeMap<LayerId, Vec<f64>>,
    rows: BTreeMap<LayerId, usize>,
}

fn add_abs(sums: &mut Vec<f64>, m: &Matrix) {
    if sums.is_empty() {
        sums.resize(m.cols(), 0.0);
    }
    for i in 0..m.rows() {
        for (s, v) in sums.iter_mut().zip(m.row(i)) {
            *s += v.abs();
        }
    }
}

impl ChannelAccumulator {
    /// Adds `|x|` and `|y|` of every tapped layer.
    pub fn add_magnitudes(&mut self, taps: &TapRecord) {
        for (id, tap) in &taps.layers {
            add_abs(self.sums_in.entry(*id).or_default(), &tap.input);
            add_abs(self.sums_out.entry(*id).or_default(), &tap.output);
            *self.rows.entry(*id).or_default() += tap.input.rows();
        }
    }

    /// Adds `|x_b − x_a|` and `|y_b − y_a|` for layers tapped in both.
    pub fn add_deltas(&mut self, before: &TapRecord, after: &TapRecord) -> Result<()> {
        for (id, a) in &before.layers {
            let Some(b) = after.get(*id) else { continue };
            add_abs(self.sums_in.entry(*id).or_default(), &b.input.sub(&a.input)?);
            add_abs(self.sums_out.entry(*id).or_default(), &b.output.sub(&a.output)?);
            *self.rows.entry(*id).or_default() += a.input.rows();
        }
        Ok(())
    }

    /// Means over all accumulated rows, floored at [`SCALE_FLOOR`].
    pub fn finish(&self, method: ScaleMethod) -> ScaleSet {
        let mean = |sums: &[f64], n: usize| -> Vec<f64> {
            sums.iter()
                .map(|s| (s / n.max(1) as f64).max(SCALE_FLOOR))
                .collect()
        };
        self.sums_in
            .iter()
            .map(|(id, s_in)| {
                let n = self.rows[id];
                (
                    *id,
                    ScalePair {
                        s_i: mean(s_in, n),
                        s_o: mean(&self.sums_out[id], n),
                        method,
                        side: ScaleSide::Both,
                    },
                )
            })
            .collect()
    }
}

/// Channel-activation-aware scales: mean `|x|`, `|y|` per channel.
///
/// For each sample in index order: `t ~ U[1, T]`, class `~ U[0, classes)`,
/// then the noise draw; one exact tapped forward at `(z_t, t)`.
pub fn ca_svd_scales(
    model: &ModelWeights,
    set: &CalibSet,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<ScaleSet> {
    set.validate(&model.config)?;
    let cfg = &model.config;
    let mut rng = Rng::new(seed);
    let mut acc = ChannelAccumulator::default();
    for z0 in &set.samples {
        let t = rng.uniform_int(1, sched.steps());
        let cond = rng.uniform_int(0, cfg.cond_classes - 1);
        let eps = Matrix::randn(cfg.tokens, cfg.hidden, 1.0, &mut rng);
        let z_t = forward_noising(z0, t, &eps, sched)?;
        let out = model.forward(&z_t, t, cond, &mut Exact)?;
        acc.add_magnitudes(&out.taps);
    }
    Ok(acc.finish(ScaleMethod::Ca))
}

/// Channel-delta-aware scales: mean `|x_{t−1} − x_t|`, `|y_{t−1} − y_t|`
/// across two consecutive deterministic DDIM steps.
///
/// For each sample in index order: `t ~ U[2, T]`, class, noise draw; forward
/// at `(z_t, t)`, DDIM to `z_{t−1}`, forward at `(z_{t−1}, t−1)`.
pub fn cd_svd_scales(
    model: &ModelWeights,
    set: &CalibSet,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<ScaleSet> {
    if sched.steps() < 2 {
        return Err(Error::InvalidSchedule("channel-delta scales need T ≥ 2".into()));
    }
    set.validate(&model.config)?;
    let cfg = &model.config;
    let mut rng = Rng::new(seed);
    let mut acc = ChannelAccumulator::default();
    for z0 in &set.samples {
        let t = rng.uniform_int(2, sched.steps());
        let cond = rng.uniform_int(0, cfg.cond_classes - 1);
        let eps = Matrix::randn(cfg.tokens, cfg.hidden, 1.0, &mut rng);
        let z_t = forward_noising(z0, t, &eps, sched)?;
        let first = model.forward(&z_t, t, cond, &mut Exact)?;
        let z_prev = ddim_step(&z_t, &first.eps, t, t - 1, sched)?;
        let second = model.forward(&z_prev, t - 1, cond, &mut Exact)?;
        acc.add_deltas(&first.taps, &second.taps)?;
    }
    Ok(acc.finish(ScaleMethod::Cd))
}

/// Builds calibration parameters for any method. `set`/`sched`/`seed` are
/// only consulted by the channel-aware methods.
pub fn calibrate(
    model: &ModelWeights,
    method: CalibMethod,
    r: usize,
    set: &CalibSet,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<CalibParams> {
    match method {
        CalibMethod::Svd => plain_svd_calib(model, r),
        CalibMethod::CaSvd => {
            let s = ca_svd_scales(model, set, sched, seed)?;
            channel_aware_calib(model, &s, r, method)
        }
        CalibMethod::CdSvd | CalibMethod::CdSvdInput | CalibMethod::CdSvdOutput => {
            let mut s = cd_svd_scales(model, set, sched, seed)?;
            if method == CalibMethod::CdSvdInput {
                s = reduce_set(&s, ScaleSide::InputOnly);
            } else if method == CalibMethod::CdSvdOutput {
                s = reduce_set(&s, ScaleSide::OutputOnly);
            }
            channel_aware_calib(model, &s, r, method)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, Slot};
    use crate::sampler::make_linear_schedule;
    use crate::tensor::frobenius_norm;

    fn model() -> ModelWeights {
        init_weights(&ModelConfig::new(2, 16, 2, 6), 1).unwrap()
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        frobenius_norm(&a.sub(b).unwrap()) / frobenius_norm(b).max(1e-300)
    }

    #[test]
    fn plain_rank_edges() {
        let w = model();
        let zero = plain_svd_calib(&w, 0).unwrap();
        for (id, p) in zero.iter() {
            assert_eq!(p.wa.cols(), 0);
            assert_eq!(p.product(), Matrix::zeros(w.linear(*id).out_dim(), w.linear(*id).in_dim()));
        }
        let full = plain_svd_calib(&w, 16).unwrap();
        for (id, p) in full.iter() {
            assert!(rel_err(&p.product(), &w.linear(*id).weight) < 1e-10);
        }
        match plain_svd_calib(&w, 17) {
            Err(Error::RankOutOfRange { layer: Some(l), .. }) => assert_eq!(l, "blocks.0.qkv"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plain_matches_eckart_young() {
        let w = model();
        let c = plain_svd_calib(&w, 5).unwrap();
        for (id, p) in c.iter() {
            let wt = &w.linear(*id).weight;
            let sig = thin_svd(wt).unwrap().sigma;
            let tail = sig[5..].iter().map(|s| s * s).sum::<f64>().sqrt();
            let err = frobenius_norm(&p.product().sub(wt).unwrap());
            assert!((err - tail).abs() <= 1e-9 * tail);
        }
    }

    #[test]
    fn identity_scales_equal_plain() {
        let w = model();
        let scales: ScaleSet = w
            .config
            .linear_layers()
            .into_iter()
            .map(|id| {
                let (o, i) = w.config.slot_shape(id.slot);
                (id, ScalePair::identity(o, i))
            })
            .collect();
        let a = channel_aware_calib(&w, &scales, 6, CalibMethod::CaSvd).unwrap();
        let b = plain_svd_calib(&w, 6).unwrap();
        for id in w.config.linear_layers() {
            let pa = a.factors(id).unwrap().product();
            let pb = b.factors(id).unwrap().product();
            assert!(frobenius_norm(&pa.sub(&pb).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn full_rank_rescale_round_trip() {
        let mut rng = Rng::new(4);
        let wt = Matrix::randn(12, 8, 1.0, &mut rng);
        let s_i: Vec<f64> = (0..8).map(|_| 0.1 + 10.0 * rng.uniform()).collect();
        let s_o: Vec<f64> = (0..12).map(|_| 0.1 + 10.0 * rng.uniform()).collect();
        let p = channel_aware_factors(&wt, &s_i, &s_o, 8).unwrap();
        assert!(frobenius_norm(&p.product().sub(&wt).unwrap()) < 1e-9);
    }

    #[test]
    fn outlier_column_is_reconstructed_better() {
        let mut rng = Rng::new(12);
        let wt = Matrix::randn(32, 32, 1.0 / 32f64.sqrt(), &mut rng);
        let mut s_i = vec![1.0; 32];
        s_i[5] = 100.0;
        let s_o = vec![1.0; 32];
        let ca = channel_aware_factors(&wt, &s_i, &s_o, 8).unwrap().product();
        let plain = plain_factors(&wt, 8).unwrap().product();
        let col_err = |approx: &Matrix| {
            (0..32)
                .map(|i| (approx[(i, 5)] - wt[(i, 5)]).powi(2))
                .sum::<f64>()
        };
        assert!(col_err(&ca) < col_err(&plain));
    }

    #[test]
    fn reductions() {
        let p = ScalePair {
            s_i: vec![2.0, 3.0],
            s_o: vec![4.0],
            method: ScaleMethod::Cd,
            side: ScaleSide::Both,
        };
        let i = reduced_variants(&p, ScaleSide::InputOnly);
        assert_eq!(i.s_o, vec![1.0]);
        assert_eq!(i.s_i, p.s_i);
        let o = reduced_variants(&p, ScaleSide::OutputOnly);
        assert_eq!(o.s_i, vec![1.0, 1.0]);
        let both = reduced_variants(&i, ScaleSide::OutputOnly);
        assert_eq!(both.s_i, vec![1.0, 1.0]);
        assert_eq!(both.s_o, vec![1.0]);
        assert_eq!(both.method, ScaleMethod::Identity);
    }

    #[test]
    fn scale_floor_enforced() {
        let w = model();
        let mut scales: ScaleSet = w
            .config
            .linear_layers()
            .into_iter()
            .map(|id| {
                let (o, i) = w.config.slot_shape(id.slot);
                (id, ScalePair::identity(o, i))
            })
            .collect();
        scales.get_mut(&LayerId::new(1, Slot::FfnFc1)).unwrap().s_i[0] = 1e-9;
        assert!(matches!(
            channel_aware_calib(&w, &scales, 2, CalibMethod::CaSvd),
            Err(Error::ScaleBelowFloor { .. })
        ));
    }

    #[test]
    fn empty_set_rejected() {
        let w = model();
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let set = CalibSet {
            samples: vec![],
            seed: None,
        };
        assert!(matches!(ca_svd_scales(&w, &set, &s, 0), Err(Error::EmptyCalibrationSet)));
        assert!(matches!(cd_svd_scales(&w, &set, &s, 0), Err(Error::EmptyCalibrationSet)));
    }

    #[test]
    fn accumulator_is_homogeneous() {
        let w = model();
        let mut rng = Rng::new(8);
        let z = Matrix::randn(6, 16, 1.0, &mut rng);
        let taps = w.forward(&z, 3, 0, &mut Exact).unwrap().taps;
        let scaled = TapRecord {
            layers: taps
                .layers
                .iter()
                .map(|(id, t)| {
                    (
                        *id,
                        crate::model::Tap {
                            input: t.input.scale(3.0),
                            output: t.output.scale(3.0),
                        },
                    )
                })
                .collect(),
        };
        let mut a = ChannelAccumulator::default();
        a.add_magnitudes(&taps);
        let mut b = ChannelAccumulator::default();
        b.add_magnitudes(&scaled);
        let (sa, sb) = (a.finish(ScaleMethod::Ca), b.finish(ScaleMethod::Ca));
        for id in w.config.linear_layers() {
            for (x, y) in sa[&id].s_i.iter().zip(&sb[&id].s_i) {
                assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn method_tags_round_trip() {
        for m in CalibMethod::ALL {
            assert_eq!(m.tag().parse::<CalibMethod>().unwrap(), m);
            assert_eq!(CalibMethod::from_code(m.code()), Some(m));
        }
        assert!("asvd".parse::<CalibMethod>().is_err());
    }
}
