//! Toy diffusion-transformer noise predictor.
//!
//! Pre-LN transformer over `N` tokens of width `d`:
//! `x ← z_t + temb(t) + cemb(c)`, then per block `x ← x + MHSA(LN(x))`,
//! `x ← x + FFN(LN(x))`, and a final `d → d` linear head. Every linear layer
//! inside a block goes through a [`LinearExecutor`], which is where caching
//! and calibration hook in.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{MacKind, Site};
use crate::tensor::{Matrix, Rng};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub tokens: usize,
    pub mlp_ratio: usize,
    pub cond_classes: usize,
    /// Multiplier on the sinusoidal timestep embedding.
    pub time_embed_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden: 64,
            heads: 4,
            tokens: 16,
            mlp_ratio: 4,
            cond_classes: 10,
            time_embed_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn new(depth: usize, hidden: usize, heads: usize, tokens: usize) -> Self {
        Self {
            depth,
            hidden,
            heads,
            tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("depth", self.depth),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("tokens", self.tokens),
            ("mlp_ratio", self.mlp_ratio),
            ("cond_classes", self.cond_classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be ≥ 1")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.time_embed_scale.is_finite() {
            return Err(Error::InvalidConfig("time_embed_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    /// Index of the unconditional ("null") class embedding.
    pub fn null_class(&self) -> usize {
        self.cond_classes
    }

    /// `(C_o, C_i)` of a linear slot.
    pub fn slot_shape(&self, slot: Slot) -> (usize, usize) {
        let d = self.hidden;
        match slot {
            Slot::Qkv => (3 * d, d),
            Slot::AttnProj => (d, d),
            Slot::FfnFc1 => (self.ffn_hidden(), d),
            Slot::FfnFc2 => (d, self.ffn_hidden()),
        }
    }

    /// All `4L` block linear layers in canonical order.
    pub fn linear_layers(&self) -> Vec<LayerId> {
        (0..self.depth)
            .flat_map(|b| Slot::ALL.iter().map(move |&s| LayerId::new(b, s)))
            .collect()
    }

    /// Smallest `min(C_o, C_i)` over all block linear layers.
    pub fn min_layer_dim(&self) -> usize {
        Slot::ALL
            .iter()
            .map(|&s| {
                let (o, i) = self.slot_shape(s);
                o.min(i)
            })
            .min()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Qkv,
    AttnProj,
    FfnFc1,
    FfnFc2,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Qkv, Slot::AttnProj, Slot::FfnFc1, Slot::FfnFc2];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Qkv => "qkv",
            Slot::AttnProj => "attn_proj",
            Slot::FfnFc1 => "ffn_fc1",
            Slot::FfnFc2 => "ffn_fc2",
        }
    }

    pub fn from_name(s: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|slot| slot.name() == s)
    }
}

/// A linear layer inside block `block`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub slot: Slot,
}

impl LayerId {
    pub fn new(block: usize, slot: Slot) -> Self {
        Self { block, slot }
    }

    /// Position in the canonical `(block, slot)` enumeration.
    pub fn index(&self) -> usize {
        self.block * 4 + Slot::ALL.iter().position(|&s| s == self.slot).unwrap()
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.slot.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `C_o × C_i`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: weight.shape(),
                right: (1, bias.len()),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `x · Wᵀ + b` for `x` of shape `N × C_i`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_t(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * self.in_dim() * self.out_dim()) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            offset: vec![0.0; d],
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let d = x.cols();
        let mut out = Matrix::zeros(x.rows(), d);
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (row[j] - mean) * inv * self.gain[j] + self.offset[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub attn_proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockWeights {
    pub fn linear(&self, slot: Slot) -> &Linear {
        match slot {
            Slot::Qkv => &self.qkv,
            Slot::AttnProj => &self.attn_proj,
            Slot::FfnFc1 => &self.fc1,
            Slot::FfnFc2 => &self.fc2,
        }
    }

    pub fn linear_mut(&mut self, slot: Slot) -> &mut Linear {
        match slot {
            Slot::Qkv => &mut self.qkv,
            Slot::AttnProj => &mut self.attn_proj,
            Slot::FfnFc1 => &mut self.fc1,
            Slot::FfnFc2 => &mut self.fc2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `(cond_classes + 1) × d`; the last row is the null class.
    pub class_embed: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub head: Linear,
}

/// Deterministic initialisation: weights `~ N(0, 1/C_i)`, class embeddings
/// `~ N(0, 1)`, zero biases, unit layer-norm gains.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let d = config.hidden;
    let class_embed = Matrix::randn(config.cond_classes + 1, d, 1.0, &mut rng);
    let linear = |slot: Slot, rng: &mut Rng| {
        let (o, i) = config.slot_shape(slot);
        Linear {
            weight: Matrix::randn(o, i, 1.0 / (i as f64).sqrt(), rng),
            bias: vec![0.0; o],
        }
    };
    let blocks = (0..config.depth)
        .map(|_| BlockWeights {
            ln1: LayerNorm::identity(d),
            qkv: linear(Slot::Qkv, &mut rng),
            attn_proj: linear(Slot::AttnProj, &mut rng),
            ln2: LayerNorm::identity(d),
            fc1: linear(Slot::FfnFc1, &mut rng),
            fc2: linear(Slot::FfnFc2, &mut rng),
        })
        .collect();
    let head = Linear {
        weight: Matrix::randn(d, d, 1.0 / (d as f64).sqrt(), &mut rng),
        bias: vec![0.0; d],
    };
    Ok(ModelWeights {
        config: config.clone(),
        class_embed,
        blocks,
        head,
    })
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)))
}

/// Sinusoidal embedding of `t` over `d` channels: cosines then sines.
pub fn timestep_embedding(t: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        let arg = t as f64 * freq;
        out[k] = libm::cos(arg);
        out[half + k] = libm::sin(arg);
    }
    out
}

/// Multi-head softmax attention on already-projected `q`, `k`, `v` (`N × d`).
/// Returns the concatenated head outputs and the per-head probability rows.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<(Matrix, Vec<Matrix>)> {
    let (n, d) = q.shape();
    if k.shape() != (n, d) || v.shape() != (n, d) {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * dh;
        let mut p = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[lo..lo + dh];
            let row = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[lo..lo + dh];
                *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*r);
            }
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = libm::exp(*r - max);
                total += *r;
            }
            row.iter_mut().for_each(|r| *r /= total);
        }
        for i in 0..n {
            for j in 0..n {
                let pij = p[(i, j)];
                let vj = &v.row(j)[lo..lo + dh];
                let o = &mut out.row_mut(i)[lo..lo + dh];
                for (oc, vc) in o.iter_mut().zip(vj) {
                    *oc += pij * vc;
                }
            }
        }
        probs.push(p);
    }
    Ok((out, probs))
}

/// Result of one linear evaluation through an executor.
#[derive(Debug, Clone)]
pub struct LinearOutput {
    pub y: Matrix,
    /// `true` when the layer was computed exactly (tap-worthy).
    pub full: bool,
}

/// Decides how each block linear layer is evaluated during a forward pass.
pub trait LinearExecutor {
    fn run_linear(&mut self, layer: LayerId, linear: &Linear, x: &Matrix) -> Result<LinearOutput>;

    /// Output that can be substituted without evaluating this layer's input
    /// at all (verbatim cache reuse). `None` means the input is needed.
    fn reuse_output(&mut self, _layer: LayerId) -> Result<Option<Matrix>> {
        Ok(None)
    }

    fn charge(&mut self, _site: Site, _kind: MacKind, _macs: u64) {}
}

/// Evaluates every layer exactly and records nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct Exact;

impl LinearExecutor for Exact {
    fn run_linear(&mut self, _layer: LayerId, linear: &Linear, x: &Matrix) -> Result<LinearOutput> {
        Ok(LinearOutput {
            y: linear.apply(x)?,
            full: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub input: Matrix,
    pub output: Matrix,
}

/// Inputs and outputs of every layer that was evaluated in full.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TapRecord {
    pub layers: BTreeMap<LayerId, Tap>,
}

impl TapRecord {
    pub fn get(&self, layer: LayerId) -> Option<&Tap> {
        self.layers.get(&layer)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Matrix,
    pub taps: TapRecord,
}

fn checked(layer: LayerId, out: LinearOutput) -> Result<LinearOutput> {
    if !out.y.is_finite() {
        return Err(Error::NonFinite {
            layer: layer.to_string(),
        });
    }
    Ok(out)
}

impl ModelWeights {
    pub fn linear(&self, layer: LayerId) -> &Linear {
        self.blocks[layer.block].linear(layer.slot)
    }

    /// `z_t + temb(t) + cemb(cond)` broadcast over tokens.
    pub fn embed(&self, z_t: &Matrix, t: usize, cond: usize) -> Result<Matrix> {
        let cfg = &self.config;
        if z_t.shape() != (cfg.tokens, cfg.hidden) {
            return Err(Error::ShapeMismatch {
                op: "embed",
                left: z_t.shape(),
                right: (cfg.tokens, cfg.hidden),
            });
        }
        if cond > cfg.null_class() {
            return Err(Error::InvalidConfig(format!(
                "class {cond} out of range (null class is {})",
                cfg.null_class()
            )));
        }
        let temb = timestep_embedding(t, cfg.hidden);
        let cemb = self.class_embed.row(cond);
        let bias: Vec<f64> = temb
            .iter()
            .zip(cemb)
            .map(|(a, b)| a * cfg.time_embed_scale + b)
            .collect();
        let mut x = z_t.clone();
        x.add_row_vector(&bias)?;
        Ok(x)
    }

    /// Noise prediction `ε_θ(z_t, t, cond)`.
    pub fn forward(
        &self,
        z_t: &Matrix,
        t: usize,
        cond: usize,
        exec: &mut dyn LinearExecutor,
    ) -> Result<ForwardOutput> {
        if t == 0 {
            return Err(Error::StepOutOfRange {
                t,
                lo: 1,
                hi: usize::MAX,
            });
        }
        if !z_t.is_finite() {
            return Err(Error::InvalidMatrix("z_t has non-finite entries".into()));
        }
        let cfg = &self.config;
        let n = cfg.tokens;
        let d = cfg.hidden;
        let mut taps = TapRecord::default();
        let mut x = self.embed(z_t, t, cond)?;

        let run = |exec: &mut dyn LinearExecutor,
                       taps: &mut TapRecord,
                       layer: LayerId,
                       input: &Matrix|
         -> Result<Matrix> {
            let out = checked(layer, exec.run_linear(layer, self.linear(layer), input)?)?;
            if out.full {
                taps.layers.insert(
                    layer,
                    Tap {
                        input: input.clone(),
                        output: out.y.clone(),
                    },
                );
            }
            Ok(out.y)
        };

        for (b, block) in self.blocks.iter().enumerate() {
            let proj_id = LayerId::new(b, Slot::AttnProj);
            let attn_out = match exec.reuse_output(proj_id)? {
                Some(y) => y,
                None => {
                    let h = block.ln1.apply(&x);
                    let qkv = run(exec, &mut taps, LayerId::new(b, Slot::Qkv), &h)?;
                    let q = Matrix::from_fn(n, d, |i, j| qkv[(i, j)]);
                    let k = Matrix::from_fn(n, d, |i, j| qkv[(i, d + j)]);
                    let v = Matrix::from_fn(n, d, |i, j| qkv[(i, 2 * d + j)]);
                    let (mixed, _) = attention(&q, &k, &v, cfg.heads)?;
                    exec.charge(
                        Site::Attention { block: b },
                        MacKind::AttentionNonlinear,
                        (2 * n * n * d) as u64,
                    );
                    run(exec, &mut taps, proj_id, &mixed)?
                }
            };
            x.add_assign(&attn_out)?;

            let fc2_id = LayerId::new(b, Slot::FfnFc2);
            let ffn_out = match exec.reuse_output(fc2_id)? {
                Some(y) => y,
                None => {
                    let h = block.ln2.apply(&x);
                    let f = run(exec, &mut taps, LayerId::new(b, Slot::FfnFc1), &h)?;
                    run(exec, &mut taps, fc2_id, &f.map(gelu))?
                }
            };
            x.add_assign(&ffn_out)?;
        }

        let eps = self.head.apply(&x)?;
        exec.charge(Site::Model, MacKind::Overhead, self.head.macs(n));
        if !eps.is_finite() {
            return Err(Error::NonFinite {
                layer: "head".into(),
            });
        }
        Ok(ForwardOutput { eps, taps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::new(2, 32, 4, 16)
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        assert!(ModelConfig::new(2, 30, 4, 16).validate().is_err());
        assert!(ModelConfig::new(0, 32, 4, 16).validate().is_err());
    }

    #[test]
    fn layer_enumeration() {
        let ids = small().linear_layers();
        assert_eq!(ids.len(), 8);
        assert_eq!(ids[0], LayerId::new(0, Slot::Qkv));
        assert_eq!(ids[5], LayerId::new(1, Slot::AttnProj));
        assert!(ids.iter().enumerate().all(|(i, id)| id.index() == i));
    }

    #[test]
    fn weight_shapes() {
        let w = init_weights(&small(), 7).unwrap();
        assert_eq!(w.blocks[0].qkv.weight.shape(), (96, 32));
        assert_eq!(w.blocks[0].attn_proj.weight.shape(), (32, 32));
        assert_eq!(w.blocks[0].fc1.weight.shape(), (128, 32));
        assert_eq!(w.blocks[0].fc2.weight.shape(), (32, 128));
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_weights(&small(), 7).unwrap(), init_weights(&small(), 7).unwrap());
        assert_ne!(init_weights(&small(), 7).unwrap(), init_weights(&small(), 8).unwrap());
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let cfg = ModelConfig::new(2, 64, 4, 16);
        let w = init_weights(&cfg, 3).unwrap();
        for id in cfg.linear_layers() {
            let m = &w.linear(id).weight;
            let n = m.as_slice().len() as f64;
            let mean = m.as_slice().iter().sum::<f64>() / n;
            let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let target = 1.0 / m.cols() as f64;
            assert!((var - target).abs() < 0.2 * target, "{id}: {var} vs {target}");
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-14);
        assert!(gelu(-10.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut rng = Rng::new(1);
        let q = Matrix::randn(1, 8, 1.0, &mut rng);
        let k = Matrix::randn(1, 8, 1.0, &mut rng);
        let v = Matrix::randn(1, 8, 1.0, &mut rng);
        let (out, _) = attention(&q, &k, &v, 2).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = Rng::new(2);
        let q = Matrix::randn(10, 16, 3.0, &mut rng);
        let k = Matrix::randn(10, 16, 3.0, &mut rng);
        let v = Matrix::randn(10, 16, 1.0, &mut rng);
        let (_, probs) = attention(&q, &k, &v, 4).unwrap();
        for p in probs {
            for i in 0..p.rows() {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_weights_pass_embedding_through() {
        let cfg = small();
        let mut w = init_weights(&cfg, 1).unwrap();
        for b in &mut w.blocks {
            for s in Slot::ALL {
                let l = b.linear_mut(s);
                l.weight = Matrix::zeros(l.out_dim(), l.in_dim());
            }
        }
        w.head.weight = Matrix::identity(cfg.hidden);
        let mut rng = Rng::new(9);
        let z = Matrix::randn(cfg.tokens, cfg.hidden, 1.0, &mut rng);
        let out = w.forward(&z, 5, 2, &mut Exact).unwrap();
        assert_eq!(out.eps, w.embed(&z, 5, 2).unwrap());
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = small();
        let w = init_weights(&cfg, 4).unwrap();
        let mut rng = Rng::new(10);
        let z = Matrix::randn(cfg.tokens, cfg.hidden, 1.0, &mut rng);
        let perm: Vec<usize> = (0..cfg.tokens).rev().collect();
        let zp = Matrix::from_fn(cfg.tokens, cfg.hidden, |i, j| z[(perm[i], j)]);
        let a = w.forward(&z, 3, 1, &mut Exact).unwrap().eps;
        let b = w.forward(&zp, 3, 1, &mut Exact).unwrap().eps;
        for i in 0..cfg.tokens {
            for j in 0..cfg.hidden {
                assert!((b[(i, j)] - a[(perm[i], j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn taps_match_external_recomputation() {
        let cfg = small();
        let w = init_weights(&cfg, 5).unwrap();
        let mut rng = Rng::new(11);
        let z = Matrix::randn(cfg.tokens, cfg.hidden, 1.0, &mut rng);
        let out = w.forward(&z, 7, 0, &mut Exact).unwrap();
        assert_eq!(out.taps.layers.len(), 4 * cfg.depth);

        let x = w.embed(&z, 7, 0).unwrap();
        let h = w.blocks[0].ln1.apply(&x);
        let tap = out.taps.get(LayerId::new(0, Slot::Qkv)).unwrap();
        assert!(tap.input.max_abs_diff(&h).unwrap() < 1e-12);
        let mut expect = h.matmul(&w.blocks[0].qkv.weight.transpose()).unwrap();
        expect.add_row_vector(&w.blocks[0].qkv.bias).unwrap();
        assert!(tap.output.max_abs_diff(&expect).unwrap() < 1e-12);

        for (id, tap) in &out.taps.layers {
            let y = w.linear(*id).apply(&tap.input).unwrap();
            assert!(y.max_abs_diff(&tap.output).unwrap() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bit_identical() {
        let cfg = small();
        let w = init_weights(&cfg, 6).unwrap();
        let mut rng = Rng::new(12);
        let z = Matrix::randn(cfg.tokens, cfg.hidden, 1.0, &mut rng);
        let a = w.forward(&z, 9, 3, &mut Exact).unwrap();
        let b = w.forward(&z, 9, 3, &mut Exact).unwrap();
        assert_eq!(a.eps, b.eps);
        assert_eq!(a.taps, b.taps);
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let cfg = small();
        let mut w = init_weights(&cfg, 6).unwrap();
        w.blocks[1].fc1.weight[(0, 0)] = f64::INFINITY;
        let z = Matrix::filled(cfg.tokens, cfg.hidden, 0.5);
        match w.forward(&z, 2, 0, &mut Exact) {
            Err(Error::NonFinite { layer }) => assert_eq!(layer, "blocks.1.ffn_fc1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small();
        let w = init_weights(&cfg, 6).unwrap();
        let z = Matrix::zeros(cfg.tokens, cfg.hidden);
        assert!(w.forward(&z, 0, 0, &mut Exact).is_err());
        assert!(w.forward(&z, 1, cfg.cond_classes + 1, &mut Exact).is_err());
        assert!(w.forward(&Matrix::zeros(3, 3), 1, 0, &mut Exact).is_err());
    }
}
