//! Proposal-side geometry: anchors, ReLU proposal scoring, box deltas, NMS,
//! the proposal cap, heuristic box expansion and RoIAlign.
//!
//! Boxes use continuous pixel-edge coordinates: pixel row `i` spans
//! `[i, i + 1)`, so an integer box `(y1, x1, y2, x2)` covers rows
//! `y1..y2` and columns `x1..x2`. Sampling a tensor at a box coordinate `c`
//! therefore reads lattice position `c * scale - 0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bilinear_taps, Tensor};

/// Axis-aligned box `(y1, x1, y2, x2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub y1: f64,
    pub x1: f64,
    pub y2: f64,
    pub x2: f64,
}

impl BBox {
    pub const fn new(y1: f64, x1: f64, y2: f64, x2: f64) -> Self {
        Self { y1, x1, y2, x2 }
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.y1 + self.y2) / 2.0, (self.x1 + self.x2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.height().max(0.0) * self.width().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.y2 > self.y1 && self.x2 > self.x1 && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.y1, self.x1, self.y2, self.x2]
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.y1 <= other.y1 && self.x1 <= other.x1 && self.y2 >= other.y2 && self.x2 >= other.x2
    }

    fn ensure_valid(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::DegenerateBox(self.y1, self.x1, self.y2, self.x2))
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let inter = ih * iw;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// A box with its post-ReLU objectness score. `index` is the originating
/// anchor and breaks score ties (lower index wins).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    pub bbox: BBox,
    pub score: f64,
    pub index: usize,
}

/// How the expansion factor is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionMode {
    /// Scale the box about its center so each side grows by the factor `k`.
    #[default]
    CenterScale,
    /// Push each edge outwards by `k` half-extents: `y1 - k*h/2`, `y2 + k*h/2`, ...
    EdgeOffset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub k: f64,
    #[serde(default)]
    pub mode: ExpansionMode,
}

impl ExpansionConfig {
    pub fn new(k: f64) -> Self {
        Self {
            k,
            mode: ExpansionMode::CenterScale,
        }
    }
}

/// Round half up.
#[inline]
pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Anchor boxes for every feature cell, ordered channel-major to match the
/// `(A, H, W)` layout of the proposal classifier output:
/// anchor `a = scale_idx * ratios.len() + ratio_idx` at cell `(y, x)` has
/// index `(a * feat_h + y) * feat_w + x`. `ratio` is height / width.
pub fn generate_anchors(
    feat_h: usize,
    feat_w: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Result<Vec<BBox>> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::InvalidArgument("anchor scales and ratios must be non-empty".into()));
    }
    if feat_h == 0 || feat_w == 0 || stride == 0 {
        return Err(Error::InvalidArgument("anchor grid and stride must be positive".into()));
    }
    if scales.iter().chain(ratios).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("anchor scales and ratios must be positive".into()));
    }
    let mut out = Vec::with_capacity(feat_h * feat_w * scales.len() * ratios.len());
    for &s in scales {
        for &r in ratios {
            let h = s * r.sqrt();
            let w = s / r.sqrt();
            for y in 0..feat_h {
                let cy = (y as f64 + 0.5) * stride as f64;
                for x in 0..feat_w {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    out.push(BBox::new(cy - h / 2.0, cx - w / 2.0, cy + h / 2.0, cx + w / 2.0));
                }
            }
        }
    }
    Ok(out)
}

/// ReLU-gated objectness: returns `(anchor index, score)` for every logit
/// whose rectified score is strictly positive, in index order.
pub fn score_proposals(logits: &Tensor) -> Vec<(usize, f64)> {
    logits
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| {
            let s = l.max(0.0);
            (s > 0.0).then_some((i, s))
        })
        .collect()
}

/// Center/log-size box deltas `(dy, dx, dh, dw)`.
pub type Deltas = [f64; 4];

pub fn apply_box_deltas(anchor: &BBox, d: &Deltas) -> BBox {
    let (h, w) = (anchor.height(), anchor.width());
    let (cy, cx) = anchor.center();
    let cy = cy + d[0] * h;
    let cx = cx + d[1] * w;
    let h = h * d[2].exp();
    let w = w * d[3].exp();
    BBox::new(cy - h / 2.0, cx - w / 2.0, cy + h / 2.0, cx + w / 2.0)
}

/// Inverse of [`apply_box_deltas`].
pub fn encode_box_deltas(anchor: &BBox, target: &BBox) -> Deltas {
    let (ah, aw) = (anchor.height(), anchor.width());
    let (acy, acx) = anchor.center();
    let (tcy, tcx) = target.center();
    [
        (tcy - acy) / ah,
        (tcx - acx) / aw,
        (target.height() / ah).ln(),
        (target.width() / aw).ln(),
    ]
}

fn rank_order(a: &ScoredProposal, b: &ScoredProposal) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

/// Greedy non-maximum suppression. Output sorted by descending score.
pub fn nms(proposals: &[ScoredProposal], iou_threshold: f64) -> Vec<ScoredProposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(rank_order);
    let mut keep: Vec<ScoredProposal> = Vec::new();
    for p in sorted {
        if keep.iter().all(|k| k.bbox.iou(&p.bbox) <= iou_threshold) {
            keep.push(p);
        }
    }
    keep
}

/// Greedy NMS that stops once `limit` boxes are kept; equal to
/// `cap_proposals(&nms(p, t), limit)` without scanning the whole list.
pub fn nms_capped(proposals: &[ScoredProposal], iou_threshold: f64, limit: usize) -> Vec<ScoredProposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(rank_order);
    let mut keep: Vec<ScoredProposal> = Vec::with_capacity(limit.min(sorted.len()));
    for p in sorted {
        if keep.len() == limit {
            break;
        }
        if keep.iter().all(|k| k.bbox.iou(&p.bbox) <= iou_threshold) {
            keep.push(p);
        }
    }
    keep
}

/// Keeps the best `limit` proposals.
pub fn cap_proposals(proposals: &[ScoredProposal], limit: usize) -> Vec<ScoredProposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(rank_order);
    sorted.truncate(limit);
    sorted
}

/// Enlarges a box by the expansion factor and rounds to whole pixels.
pub fn expand_box(b: &BBox, cfg: &ExpansionConfig) -> Result<BBox> {
    b.ensure_valid()?;
    if !(cfg.k >= 1.0) {
        return Err(Error::InvalidArgument(format!("expansion factor k = {} must be >= 1", cfg.k)));
    }
    let (h, w) = (b.height(), b.width());
    let k = cfg.k;
    let r = round_half_up;
    if k == 1.0 && cfg.mode == ExpansionMode::CenterScale {
        return Ok(round_box(b));
    }
    Ok(match cfg.mode {
        ExpansionMode::CenterScale => {
            let (cy, cx) = b.center();
            BBox::new(
                r(cy - k * h / 2.0),
                r(cx - k * w / 2.0),
                r(cy + k * h / 2.0),
                r(cx + k * w / 2.0),
            )
        }
        ExpansionMode::EdgeOffset => BBox::new(
            r(b.y1 - k * h / 2.0),
            r(b.x1 - k * w / 2.0),
            r(b.y2 + k * h / 2.0),
            r(b.x2 + k * w / 2.0),
        ),
    })
}

/// Rounds every coordinate half up to whole pixels.
pub fn round_box(b: &BBox) -> BBox {
    BBox::new(round_half_up(b.y1), round_half_up(b.x1), round_half_up(b.y2), round_half_up(b.x2))
}

/// Clamps a box to the `img_h x img_w` frame.
pub fn clip_box(b: &BBox, img_h: usize, img_w: usize) -> Result<BBox> {
    let (h, w) = (img_h as f64, img_w as f64);
    let c = BBox::new(b.y1.clamp(0.0, h), b.x1.clamp(0.0, w), b.y2.clamp(0.0, h), b.x2.clamp(0.0, w));
    c.ensure_valid()?;
    Ok(c)
}

/// Side length `N = R(14 k)` of the second RoIAlign's square output.
pub fn roialign2_output_size(k: f64) -> usize {
    round_half_up(14.0 * k) as usize
}

/// RoIAlign sampling geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAlignSpec {
    pub out_h: usize,
    pub out_w: usize,
    pub spatial_scale: f64,
    /// Sample points per bin along each axis; 0 picks
    /// `max(2, ceil(3 * bin extent))` per axis, i.e. at least three samples
    /// per lattice cell.
    pub sampling: usize,
}

impl RoiAlignSpec {
    pub fn new(out_h: usize, out_w: usize, spatial_scale: f64) -> Self {
        Self {
            out_h,
            out_w,
            spatial_scale,
            sampling: 0,
        }
    }

    pub fn with_sampling(mut self, sampling: usize) -> Self {
        self.sampling = sampling;
        self
    }

    fn counts(&self, bin_h: f64, bin_w: f64) -> (usize, usize) {
        if self.sampling > 0 {
            (self.sampling, self.sampling)
        } else {
            let a = |e: f64| ((3.0 * e).ceil() as usize).max(2);
            (a(bin_h), a(bin_w))
        }
    }

    /// Lattice coordinates of every sample for bin `(by, bx)` and the
    /// weight `1 / samples` each one carries.
    fn bin_samples(&self, b: &BBox, by: usize, bx: usize) -> (impl Iterator<Item = (f64, f64)>, f64) {
        let sc = self.spatial_scale;
        let y1 = b.y1 * sc;
        let x1 = b.x1 * sc;
        let bin_h = b.height() * sc / self.out_h as f64;
        let bin_w = b.width() * sc / self.out_w as f64;
        let (sy, sx) = self.counts(bin_h, bin_w);
        let it = (0..sy * sx).map(move |i| {
            let (iy, ix) = (i / sx, i % sx);
            let y = y1 + bin_h * (by as f64 + (iy as f64 + 0.5) / sy as f64) - 0.5;
            let x = x1 + bin_w * (bx as f64 + (ix as f64 + 0.5) / sx as f64) - 0.5;
            (y, x)
        });
        (it, 1.0 / (sy * sx) as f64)
    }

    fn validate(&self, b: &BBox) -> Result<()> {
        b.ensure_valid()?;
        if self.out_h == 0 || self.out_w == 0 || !(self.spatial_scale > 0.0) {
            return Err(Error::InvalidArgument("RoIAlign output size and scale must be positive".into()));
        }
        Ok(())
    }
}

/// Quantization-free bilinear pooling of `box` from `feature` into an
/// `out_h x out_w` grid; each bin averages a regular grid of bilinear samples.
pub fn roialign(feature: &Tensor, b: &BBox, spec: &RoiAlignSpec) -> Result<Tensor> {
    spec.validate(b)?;
    let (c, h, w) = feature.dims3()?;
    let mut out = Tensor::zeros(&[c, spec.out_h, spec.out_w]);
    let mut acc = vec![0.0; c];
    for by in 0..spec.out_h {
        for bx in 0..spec.out_w {
            acc.fill(0.0);
            let (samples, inv) = spec.bin_samples(b, by, bx);
            for (y, x) in samples {
                let taps = bilinear_taps(h, w, y, x);
                for (ci, a) in acc.iter_mut().enumerate() {
                    let plane = feature.channel(ci);
                    *a += taps.iter().map(|&(i, wt)| wt * plane[i]).sum::<f64>();
                }
            }
            for (ci, a) in acc.iter().enumerate() {
                *out.at3_mut(ci, by, bx) = a * inv;
            }
        }
    }
    Ok(out)
}

/// Accumulates the RoIAlign gradient `grad_out` onto `grad_feature`.
pub fn roialign_backward(grad_feature: &mut Tensor, b: &BBox, spec: &RoiAlignSpec, grad_out: &Tensor) -> Result<()> {
    spec.validate(b)?;
    let (c, h, w) = grad_feature.dims3()?;
    if grad_out.shape() != [c, spec.out_h, spec.out_w] {
        return Err(Error::Shape(format!(
            "RoIAlign grad {:?} does not match [{c}, {}, {}]",
            grad_out.shape(),
            spec.out_h,
            spec.out_w
        )));
    }
    let plane = h * w;
    let data = grad_feature.data_mut();
    for by in 0..spec.out_h {
        for bx in 0..spec.out_w {
            let (samples, inv) = spec.bin_samples(b, by, bx);
            for (y, x) in samples {
                let taps = bilinear_taps(h, w, y, x);
                for ci in 0..c {
                    let g = grad_out.at3(ci, by, bx) * inv;
                    if g == 0.0 {
                        continue;
                    }
                    for &(i, wt) in &taps {
                        data[ci * plane + i] += wt * g;
                    }
                }
            }
        }
    }
    Ok(())
}
