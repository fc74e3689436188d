//! All trainable tensors of the pipeline and their binary file format:
//!
//! ```text
//! "RSRCNN1"  u32 count  { u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f32 data[..] }*
//! ```
//!
//! Integers and floats are little-endian; data is row-major.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::head::HeadWeights;
use crate::lrs::LrsWeights;
use crate::tensor::{prefixed, prefixed_mut, ConvLayer, ParamSet, Tensor};

use super::config::PipelineConfig;

pub const MAGIC: &[u8; 7] = b"RSRCNN1";

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineWeights {
    /// Stride-2 blocks followed by the stride-1 feature conv.
    pub backbone: Vec<ConvLayer>,
    /// 1x1 objectness logits, one channel per anchor shape.
    pub rpn_cls: ConvLayer,
    /// 1x1 box deltas, channel `a * 4 + j`.
    pub rpn_box: ConvLayer,
    pub head: HeadWeights,
    pub lrs: LrsWeights,
}

impl PipelineWeights {
    pub fn zeros(cfg: &PipelineConfig) -> Self {
        let mut backbone = Vec::new();
        let mut c = 1;
        for &w in &cfg.backbone.widths {
            backbone.push(ConvLayer::zeros(w, c, 3, 2, 1));
            c = w;
        }
        let f = cfg.backbone.feature_channels;
        backbone.push(ConvLayer::same(f, c, 3));
        let a = cfg.anchors.per_cell();
        Self {
            backbone,
            rpn_cls: ConvLayer::same(a, f, 1),
            rpn_box: ConvLayer::same(4 * a, f, 1),
            head: HeadWeights::zeros(f, cfg.pool, cfg.head_hidden),
            lrs: LrsWeights::zeros(f, cfg.lrs_hidden),
        }
    }

    pub fn init(cfg: &PipelineConfig, rng: &mut impl Rng) -> Self {
        let z = Self::zeros(cfg);
        let backbone = z.backbone.into_iter().map(|l| l.he_uniform(rng)).collect();
        let small = |mut l: ConvLayer, limit: f64, rng: &mut dyn rand::RngCore| {
            for v in l.weight.data_mut() {
                *v = rng.gen_range(-limit..limit);
            }
            l
        };
        let rpn_cls = small(z.rpn_cls, 0.01, rng);
        let rpn_box = small(z.rpn_box, 0.001, rng);
        Self {
            backbone,
            rpn_cls,
            rpn_box,
            head: HeadWeights::init(cfg.backbone.feature_channels, cfg.pool, cfg.head_hidden, rng),
            lrs: LrsWeights::init(cfg.backbone.feature_channels, cfg.lrs_hidden, rng),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.last().map_or(0, |l| l.out_ch())
    }

    /// Rounds every value to the nearest `f32`, the precision of the file.
    pub fn quantize(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, encode(self)).map_err(|e| Error::io(path, e))
    }

    /// Loads a file written for the architecture described by `cfg`.
    pub fn load(path: &Path, cfg: &PipelineConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self::zeros(cfg);
        decode_into(&bytes, &mut w).map_err(|msg| Error::format(path, msg))?;
        Ok(w)
    }
}

impl ParamSet for PipelineWeights {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            v.extend(prefixed(&format!("backbone.{i}"), l.named_tensors()));
        }
        v.extend(prefixed("rpn.cls", self.rpn_cls.named_tensors()));
        v.extend(prefixed("rpn.box", self.rpn_box.named_tensors()));
        v.extend(prefixed("head", self.head.named_tensors()));
        v.extend(prefixed("lrs", self.lrs.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, l) in self.backbone.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("backbone.{i}"), l.named_tensors_mut()));
        }
        v.extend(prefixed_mut("rpn.cls", self.rpn_cls.named_tensors_mut()));
        v.extend(prefixed_mut("rpn.box", self.rpn_box.named_tensors_mut()));
        v.extend(prefixed_mut("head", self.head.named_tensors_mut()));
        v.extend(prefixed_mut("lrs", self.lrs.named_tensors_mut()));
        v
    }

    fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.iter().map(ParamSet::zeros_like).collect(),
            rpn_cls: self.rpn_cls.zeros_like(),
            rpn_box: self.rpn_box.zeros_like(),
            head: self.head.zeros_like(),
            lrs: self.lrs.zeros_like(),
        }
    }
}

pub fn encode(w: &impl ParamSet) -> Vec<u8> {
    let tensors = w.named_tensors();
    let mut out = MAGIC.to_vec();
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} while reading {what}", self.pos)),
        }
    }

    fn u32(&mut self, what: &str) -> std::result::Result<usize, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses `bytes` into the tensors of `w`, which fixes the expected names
/// and shapes.
pub fn decode_into(bytes: &[u8], w: &mut impl ParamSet) -> std::result::Result<(), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err("not a weight file (bad magic)".into());
    }
    let count = r.u32("tensor count")?;
    let mut found: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for i in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format!("tensor {i}: name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32("dims")?);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor size overflows")?;
        let raw = r.take(n.checked_mul(4).ok_or("tensor size overflows")?, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if found.insert(name.clone(), (dims, data)).is_some() {
            return Err(format!("tensor {name} appears more than once"));
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos));
    }
    for (name, t) in w.named_tensors_mut() {
        let (dims, data) = found.remove(&name).ok_or_else(|| format!("missing tensor {name}"))?;
        if dims != t.shape() {
            return Err(format!("tensor {name}: file has shape {dims:?}, model expects {:?}", t.shape()));
        }
        t.data_mut().copy_from_slice(&data);
    }
    if let Some(extra) = found.keys().next() {
        return Err(format!("unexpected tensor {extra}"));
    }
    Ok(())
}
