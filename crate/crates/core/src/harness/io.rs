//! `ICW1` named-tensor container used for weights, calibration factors and
//! sampled latents.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ICW1"  u32 version  u32 tensor_count
//! per tensor:
//!   u16 name_len  name (UTF-8)  u8 dtype (0 = f32, 1 = f64)  u8 rank
//!   u64 dims[rank]  raw little-endian data (product(dims) elements)
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::calibration::{CalibMethod, CalibParams, FactorPair};
use crate::error::{Error, Result};
use crate::model::{BlockWeights, LayerId, LayerNorm, Linear, ModelConfig, ModelWeights, Slot};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"ICW1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
    /// Values widened to `f64`; `f32` tensors hold exactly representable values.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dtype: DType, dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let count: u64 = dims.iter().product();
        if count as usize != data.len() {
            return Err(Error::InvalidMatrix(format!(
                "tensor {name}: dims {dims:?} need {count} elements, got {}",
                data.len()
            )));
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(Error::InvalidMatrix(format!("tensor {name}: name or rank too long")));
        }
        let data = match dtype {
            DType::F64 => data,
            DType::F32 => data.into_iter().map(|v| v as f32 as f64).collect(),
        };
        Ok(Self {
            name,
            dtype,
            dims,
            data,
        })
    }

    pub fn from_matrix(name: impl Into<String>, dtype: DType, m: &Matrix) -> Self {
        Self::new(
            name,
            dtype,
            vec![m.rows() as u64, m.cols() as u64],
            m.as_slice().to_vec(),
        )
        .expect("matrix dims are consistent")
    }

    pub fn from_vector(name: impl Into<String>, dtype: DType, v: &[f64]) -> Self {
        Self::new(name, dtype, vec![v.len() as u64], v.to_vec()).expect("vector dims are consistent")
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::from_vec(*r as usize, *c as usize, self.data.clone()),
            _ => Err(Error::Mismatch(format!(
                "tensor {} has rank {}, expected 2",
                self.name,
                self.dims.len()
            ))),
        }
    }

    pub fn to_vector(&self) -> Result<Vec<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::Mismatch(format!(
                "tensor {} has rank {}, expected 1",
                self.name,
                self.dims.len()
            )));
        }
        Ok(self.data.clone())
    }
}

/// Ordered set of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorSet {
    tensors: Vec<Tensor>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Tensor) -> Result<()> {
        if self.get(&t.name).is_some() {
            return Err(Error::Mismatch(format!("duplicate tensor name {}", t.name)));
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Mismatch(format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

pub fn encode(set: &TensorSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for t in set.iter() {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype as u8);
        out.push(t.dims.len() as u8);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t.dtype {
            DType::F64 => t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return r.fail(0, "bad magic");
    }
    let version = r.u32()?;
    if version != VERSION {
        return r.fail(4, format!("unsupported version {version}"));
    }
    let count = r.u32()?;
    let mut set = TensorSet::new();
    let mut names = HashSet::new();
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .or_else(|_| r.fail(name_at + 2, "name is not UTF-8"))?
            .to_string();
        if !names.insert(name.clone()) {
            return r.fail(name_at, format!("duplicate tensor name {name}"));
        }
        let dtype_at = r.pos;
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            other => return r.fail(dtype_at, format!("unknown dtype {other}")),
        };
        let rank = r.u8()? as usize;
        let dims_at = r.pos;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|c| usize::try_from(c).ok())
            .and_then(|c| c.checked_mul(dtype.size()).map(|b| (c, b)));
        let Some((count, nbytes)) = count else {
            return r.fail(dims_at, "tensor size overflows");
        };
        let raw = r.take(nbytes)?;
        let data = match dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect::<Vec<_>>(),
        };
        debug_assert_eq!(data.len(), count);
        set.tensors.push(Tensor {
            name,
            dtype,
            dims,
            data,
        });
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(set)
}

pub fn save_tensors(path: impl AsRef<Path>, set: &TensorSet) -> Result<()> {
    std::fs::write(path, encode(set))?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<TensorSet> {
    decode(&std::fs::read(path)?)
}

const CONFIG_TENSOR: &str = "config";

pub fn weights_to_tensors(w: &ModelWeights, dtype: DType) -> TensorSet {
    let c = &w.config;
    let mut set = TensorSet::new();
    let mut add = |t: Tensor| set.push(t).expect("weight names are unique");
    // The config is always stored in f64 so it survives an f32 weight file.
    add(Tensor::from_vector(
        CONFIG_TENSOR,
        DType::F64,
        &[
            c.depth as f64,
            c.hidden as f64,
            c.heads as f64,
            c.tokens as f64,
            c.mlp_ratio as f64,
            c.cond_classes as f64,
            c.time_embed_scale,
        ],
    ));
    add(Tensor::from_matrix("class_embed", dtype, &w.class_embed));
    for (b, block) in w.blocks.iter().enumerate() {
        for (tag, ln) in [("ln1", &block.ln1), ("ln2", &block.ln2)] {
            add(Tensor::from_vector(format!("blocks.{b}.{tag}.gain"), dtype, &ln.gain));
            add(Tensor::from_vector(format!("blocks.{b}.{tag}.offset"), dtype, &ln.offset));
        }
        for slot in Slot::ALL {
            let id = LayerId::new(b, slot);
            let l = block.linear(slot);
            add(Tensor::from_matrix(format!("{id}.weight"), dtype, &l.weight));
            add(Tensor::from_vector(format!("{id}.bias"), dtype, &l.bias));
        }
    }
    add(Tensor::from_matrix("head.weight", dtype, &w.head.weight));
    add(Tensor::from_vector("head.bias", dtype, &w.head.bias));
    set
}

fn expect_shape(m: &Matrix, want: (usize, usize), name: &str) -> Result<()> {
    if m.shape() != want {
        return Err(Error::Mismatch(format!(
            "{name}: shape {:?}, expected {want:?}",
            m.shape()
        )));
    }
    Ok(())
}

pub fn weights_from_tensors(set: &TensorSet) -> Result<ModelWeights> {
    let raw = set.require(CONFIG_TENSOR)?.to_vector()?;
    let [depth, hidden, heads, tokens, mlp_ratio, cond_classes, time_embed_scale] = raw[..] else {
        return Err(Error::Mismatch(format!("config tensor has {} entries, expected 7", raw.len())));
    };
    let config = ModelConfig {
        depth: depth as usize,
        hidden: hidden as usize,
        heads: heads as usize,
        tokens: tokens as usize,
        mlp_ratio: mlp_ratio as usize,
        cond_classes: cond_classes as usize,
        time_embed_scale,
    };
    config.validate()?;
    let d = config.hidden;
    let vector = |name: &str, len: usize| -> Result<Vec<f64>> {
        let v = set.require(name)?.to_vector()?;
        if v.len() != len {
            return Err(Error::Mismatch(format!("{name}: length {}, expected {len}", v.len())));
        }
        Ok(v)
    };
    let class_embed = set.require("class_embed")?.to_matrix()?;
    expect_shape(&class_embed, (config.cond_classes + 1, d), "class_embed")?;
    let linear = |id: LayerId| -> Result<Linear> {
        let (o, i) = config.slot_shape(id.slot);
        let weight = set.require(&format!("{id}.weight"))?.to_matrix()?;
        expect_shape(&weight, (o, i), &format!("{id}.weight"))?;
        Linear::new(weight, vector(&format!("{id}.bias"), o)?)
    };
    let norm = |b: usize, tag: &str| -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: vector(&format!("blocks.{b}.{tag}.gain"), d)?,
            offset: vector(&format!("blocks.{b}.{tag}.offset"), d)?,
        })
    };
    let blocks = (0..config.depth)
        .map(|b| {
            Ok(BlockWeights {
                ln1: norm(b, "ln1")?,
                qkv: linear(LayerId::new(b, Slot::Qkv))?,
                attn_proj: linear(LayerId::new(b, Slot::AttnProj))?,
                ln2: norm(b, "ln2")?,
                fc1: linear(LayerId::new(b, Slot::FfnFc1))?,
                fc2: linear(LayerId::new(b, Slot::FfnFc2))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head_w = set.require("head.weight")?.to_matrix()?;
    expect_shape(&head_w, (d, d), "head.weight")?;
    let head = Linear::new(head_w, vector("head.bias", d)?)?;
    Ok(ModelWeights {
        config,
        class_embed,
        blocks,
        head,
    })
}

const CALIB_META: &str = "calib.meta";

pub fn calib_to_tensors(c: &CalibParams, dtype: DType) -> TensorSet {
    let mut set = TensorSet::new();
    set.push(Tensor::from_vector(
        CALIB_META,
        DType::F64,
        &[c.rank() as f64, c.method().code() as f64],
    ))
    .unwrap();
    let tag = c.method().tag();
    for (id, pair) in c.iter() {
        set.push(Tensor::from_matrix(format!("calib.{tag}.{id}.wa"), dtype, &pair.wa))
            .unwrap();
        set.push(Tensor::from_matrix(format!("calib.{tag}.{id}.wb"), dtype, &pair.wb))
            .unwrap();
    }
    set
}

pub fn calib_from_tensors(set: &TensorSet) -> Result<CalibParams> {
    let meta = set.require(CALIB_META)?.to_vector()?;
    let [rank, code] = meta[..] else {
        return Err(Error::Mismatch("calib.meta must have 2 entries".into()));
    };
    let method = CalibMethod::from_code(code as u8)
        .ok_or_else(|| Error::Mismatch(format!("unknown calibration method code {code}")))?;
    let prefix = format!("calib.{}.", method.tag());
    let mut factors = BTreeMap::new();
    for t in set.iter() {
        let Some(rest) = t.name.strip_prefix(&prefix) else {
            continue;
        };
        let Some(layer) = rest.strip_suffix(".wa") else {
            continue;
        };
        let id = parse_layer_id(layer)?;
        let wa = t.to_matrix()?;
        let wb = set.require(&format!("{prefix}{layer}.wb"))?.to_matrix()?;
        factors.insert(id, FactorPair { wa, wb });
    }
    CalibParams::new(rank as usize, method, factors)
}

/// Parses `blocks.<b>.<slot>`.
pub fn parse_layer_id(s: &str) -> Result<LayerId> {
    let bad = || Error::Mismatch(format!("bad layer name {s:?}"));
    let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
    let (block, slot) = rest.split_once('.').ok_or_else(bad)?;
    Ok(LayerId::new(
        block.parse().map_err(|_| bad())?,
        Slot::from_name(slot).ok_or_else(bad)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::plain_svd_calib;
    use crate::model::init_weights;
    use crate::tensor::Rng;

    fn sample_set() -> TensorSet {
        let mut rng = Rng::new(3);
        let mut s = TensorSet::new();
        s.push(Tensor::from_matrix("a", DType::F64, &Matrix::randn(3, 4, 1.0, &mut rng)))
            .unwrap();
        s.push(Tensor::from_vector("b", DType::F32, &[1.5, -2.25, 3.0])).unwrap();
        s.push(Tensor::new("scalar", DType::F64, vec![], vec![7.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_set());
        assert_eq!(&bytes[..4], b"ICW1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 1);
        assert_eq!(bytes[16], 2);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 3);
    }

    #[test]
    fn round_trip_bytes() {
        let bytes = encode(&sample_set());
        let back = decode(&bytes).unwrap();
        assert_eq!(back, sample_set());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn truncation_offsets() {
        let bytes = encode(&sample_set());
        match decode(&bytes[..10]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        match decode(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12 && offset < bytes.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_corrupt_headers() {
        let mut bytes = encode(&sample_set());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode(&sample_set());
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
        let mut bytes = encode(&sample_set());
        bytes[15] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 15, .. })));
        let mut bytes = encode(&sample_set());
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn f32_precision() {
        let mut rng = Rng::new(9);
        let m = Matrix::randn(20, 20, 1.0, &mut rng);
        let t = Tensor::from_matrix("m", DType::F32, &m);
        let mut s = TensorSet::new();
        s.push(t).unwrap();
        let back = decode(&encode(&s)).unwrap().get("m").unwrap().to_matrix().unwrap();
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 1e-6 * a.abs());
        }
    }

    #[test]
    fn weights_round_trip() {
        let w = init_weights(&ModelConfig::new(2, 8, 2, 4), 5).unwrap();
        let set = weights_to_tensors(&w, DType::F64);
        assert_eq!(weights_from_tensors(&decode(&encode(&set)).unwrap()).unwrap(), w);
    }

    #[test]
    fn calib_round_trip() {
        let w = init_weights(&ModelConfig::new(2, 8, 2, 4), 5).unwrap();
        for r in [0, 3] {
            let c = plain_svd_calib(&w, r).unwrap();
            let back = calib_from_tensors(&decode(&encode(&calib_to_tensors(&c, DType::F64))).unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn layer_names_parse() {
        let id = LayerId::new(3, Slot::FfnFc2);
        assert_eq!(parse_layer_id(&id.to_string()).unwrap(), id);
        assert!(parse_layer_id("blocks.x.qkv").is_err());
        assert!(parse_layer_id("head").is_err());
    }
}
