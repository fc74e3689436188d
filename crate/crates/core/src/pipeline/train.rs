//! Joint SGD over backbone, proposal network, head and segmentation head.
//!
//! Each step sees one (optionally augmented) normalized crop. A [`StepPlan`]
//! fixes the sampled anchors and ROIs so the loss is a deterministic
//! function of the weights, which is what the gradient checks rely on.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, normalize, SliceRecord};
use crate::error::{Error, Result};
use crate::head::{head_forward, head_loss_backward, smooth_l1, smooth_l1_grad, HeadTarget};
use crate::lrs::{lrs_backward, lrs_forward, mask_bce_grad_logits, mask_bce_loss, EpochRecord, PlateauSchedule, Sgd};
use crate::metrics::Mask;
use crate::proposal::{
    clip_box, encode_box_deltas, expand_box, generate_anchors, roialign, roialign_backward, BBox, Deltas, RoiAlignSpec,
};
use crate::tensor::{conv2d_backward, sigmoid_scalar, ParamSet, Tensor};

use super::config::PipelineConfig;
use super::model::{anchor_deltas, backbone_backward, backbone_trace, decode_proposals, rpn_forward, BackboneTrace};
use super::weights::PipelineWeights;

/// Bounding boxes of the 8-connected components of `mask`, in scan order
/// of each component's first pixel.
pub fn component_boxes(mask: &Mask) -> Vec<BBox> {
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if seen[y0 * w + x0] || !mask.get(y0, x0) {
                continue;
            }
            let (mut y1, mut x1, mut y2, mut x2) = (y0, x0, y0, x0);
            seen[y0 * w + x0] = true;
            stack.push((y0, x0));
            while let Some((y, x)) = stack.pop() {
                y1 = y1.min(y);
                x1 = x1.min(x);
                y2 = y2.max(y);
                x2 = x2.max(x);
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        if !seen[ny * w + nx] && mask.get(ny, nx) {
                            seen[ny * w + nx] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            out.push(BBox::new(y1 as f64, x1 as f64, (y2 + 1) as f64, (x2 + 1) as f64));
        }
    }
    out
}

/// One normalized training crop.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: Tensor,
    pub mask: Mask,
}

impl TrainSample {
    /// Crops `(y0, x0, size)` out of a normalized slice.
    pub fn crop(image: &Tensor, mask: &Mask, y0: usize, x0: usize, size: usize) -> Self {
        let (_, _, w) = image.dims3().expect("slice image is (1, H, W)");
        let img = Tensor::from_fn(&[1, size, size], |i| image.data()[(y0 + i / size) * w + x0 + i % size]);
        let m = Mask::from_fn(size, size, |y, x| mask.get(y0 + y, x0 + x));
        Self { image: img, mask: m }
    }
}

/// Normalizes a slice and takes the training crop. Random crops prefer
/// lesion neighborhoods; `rng = None` gives the deterministic validation
/// crop (first lesion pixel, else the center).
pub fn make_sample(record: &SliceRecord, cfg: &PipelineConfig, rng: Option<&mut ChaCha8Rng>) -> Result<TrainSample> {
    let image = normalize(&record.image);
    let (h, w) = (record.height(), record.width());
    let size = cfg.trainer.crop;
    if size == 0 || (size >= h && size >= w) {
        return Ok(TrainSample {
            image,
            mask: record.mask.clone(),
        });
    }
    if size > h || size > w {
        return Err(Error::Config(format!("training crop {size} exceeds the {h}x{w} slice")));
    }
    let stride = cfg.stride();
    let lesion = (0..h * w).filter(|&i| record.mask.get(i / w, i % w));
    let (cy, cx) = match rng {
        Some(rng) => {
            let pts: Vec<usize> = lesion.collect();
            if !pts.is_empty() && rng.gen::<f64>() < cfg.trainer.lesion_crop_prob {
                let p = pts[rng.gen_range(0..pts.len())];
                let j = (size / 4) as isize;
                (
                    ((p / w) as isize + rng.gen_range(-j..=j)).max(0) as usize,
                    ((p % w) as isize + rng.gen_range(-j..=j)).max(0) as usize,
                )
            } else {
                (rng.gen_range(0..h), rng.gen_range(0..w))
            }
        }
        None => lesion.map(|p| (p / w, p % w)).next().unwrap_or((h / 2, w / 2)),
    };
    // crop origins stay on the feature grid
    let origin = |c: usize, limit: usize| -> usize {
        let o = c.saturating_sub(size / 2).min(limit - size);
        o / stride * stride
    };
    Ok(TrainSample::crop(&image, &record.mask, origin(cy, h), origin(cx, w), size))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpnTarget {
    pub index: usize,
    pub positive: bool,
    pub deltas: Deltas,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiTarget {
    pub bbox: BBox,
    pub target: HeadTarget,
    /// Expanded box and its `(1, N, N)` mask target.
    pub mask: Option<(BBox, Tensor)>,
}

/// Sampled anchors and ROIs of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepPlan {
    pub rpn: Vec<RpnTarget>,
    pub rois: Vec<RoiTarget>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub head: f64,
    pub mask: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_box + self.head + self.mask
    }
}

struct Forward {
    trace: BackboneTrace,
    logits: Tensor,
    deltas: Tensor,
    anchors: Vec<BBox>,
}

fn forward(sample: &TrainSample, w: &PipelineWeights, cfg: &PipelineConfig) -> Result<Forward> {
    let trace = backbone_trace(&sample.image, &w.backbone)?;
    let (logits, deltas) = rpn_forward(&trace.features, w)?;
    let (_, fh, fw) = logits.dims3()?;
    let anchors = generate_anchors(fh, fw, cfg.stride(), &cfg.anchors.scales, &cfg.anchors.ratios)?;
    Ok(Forward {
        trace,
        logits,
        deltas,
        anchors,
    })
}

/// Mask target sampled at the bin centers of `b` (nearest pixel).
pub fn mask_target(mask: &Mask, b: &BBox, n: usize) -> Tensor {
    let (bh, bw) = (b.height() / n as f64, b.width() / n as f64);
    Tensor::from_fn(&[1, n, n], |i| {
        let y = (b.y1 + (i / n) as f64 * bh + 0.5 * bh).floor();
        let x = (b.x1 + (i % n) as f64 * bw + 0.5 * bw).floor();
        let inside = y >= 0.0 && x >= 0.0 && (y as usize) < mask.h && (x as usize) < mask.w;
        f64::from(u8::from(inside && mask.get(y as usize, x as usize)))
    })
}

fn best_match(b: &BBox, gts: &[BBox]) -> (f64, usize) {
    gts.iter()
        .enumerate()
        .map(|(i, g)| (b.iou(g), i))
        .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc })
}

fn jitter(b: &BBox, rng: &mut impl Rng) -> BBox {
    let (h, w) = (b.height(), b.width());
    let (cy, cx) = b.center();
    let cy = cy + rng.gen_range(-0.2..0.2) * h;
    let cx = cx + rng.gen_range(-0.2..0.2) * w;
    let h = h * rng.gen_range(-0.25f64..0.25).exp();
    let w = w * rng.gen_range(-0.25f64..0.25).exp();
    BBox::new(cy - h / 2.0, cx - w / 2.0, cy + h / 2.0, cx + w / 2.0)
}

fn plan_from(fwd: &Forward, sample: &TrainSample, cfg: &PipelineConfig, rng: &mut impl Rng) -> Result<StepPlan> {
    let t = &cfg.trainer;
    let (h, w) = (sample.mask.h, sample.mask.w);
    let gts = component_boxes(&sample.mask);

    // anchors
    let matches: Vec<(f64, usize)> = fwd.anchors.iter().map(|a| best_match(a, &gts)).collect();
    let mut best_for_gt = vec![0.0f64; gts.len()];
    for (a, _) in fwd.anchors.iter().zip(&matches) {
        for (g, b) in gts.iter().zip(best_for_gt.iter_mut()) {
            *b = b.max(a.iou(g));
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, (a, &(iou, gi))) in fwd.anchors.iter().zip(&matches).enumerate() {
        let is_best = gts.iter().zip(&best_for_gt).any(|(g, &b)| b > 0.0 && a.iou(g) == b);
        if iou >= t.rpn_positive_iou || is_best {
            let gi = if is_best && iou < t.rpn_positive_iou {
                gts.iter().zip(&best_for_gt).position(|(g, &b)| b > 0.0 && a.iou(g) == b).unwrap_or(gi)
            } else {
                gi
            };
            pos.push((i, gi));
        } else if iou < t.rpn_negative_iou {
            neg.push(i);
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min((t.rpn_batch as f64 * t.rpn_positive_fraction) as usize);
    let n_neg = neg.len().min(t.rpn_batch - n_pos);
    let mut rpn: Vec<RpnTarget> = pos[..n_pos]
        .iter()
        .map(|&(i, gi)| RpnTarget {
            index: i,
            positive: true,
            deltas: encode_box_deltas(&fwd.anchors[i], &gts[gi]),
        })
        .collect();
    rpn.extend(neg[..n_neg].iter().map(|&i| RpnTarget {
        index: i,
        positive: false,
        deltas: [0.0; 4],
    }));

    // ROI candidates: ground truth, jittered ground truth, current
    // proposals and random anchors
    let mut cands: Vec<BBox> = Vec::new();
    for g in &gts {
        cands.push(*g);
        for _ in 0..3 {
            cands.push(jitter(g, rng));
        }
    }
    cands.extend(decode_proposals(&fwd.logits, &fwd.deltas, &fwd.anchors, h, w, cfg)?.iter().map(|p| p.bbox));
    for _ in 0..t.roi_batch {
        cands.push(fwd.anchors[rng.gen_range(0..fwd.anchors.len())]);
    }
    let mut rpos = Vec::new();
    let mut rneg = Vec::new();
    for c in cands {
        let Ok(c) = clip_box(&c, h, w) else { continue };
        let (iou, gi) = best_match(&c, &gts);
        if iou >= t.roi_positive_iou {
            rpos.push((c, gi));
        } else {
            rneg.push(c);
        }
    }
    rpos.shuffle(rng);
    rneg.shuffle(rng);
    let n_pos = rpos.len().min((t.roi_batch as f64 * t.roi_positive_fraction).round() as usize);
    let n_neg = rneg.len().min(t.roi_batch - n_pos);
    let n = cfg.roi2_size();
    let mut rois = Vec::with_capacity(n_pos + n_neg);
    for (k, &(b, gi)) in rpos[..n_pos].iter().enumerate() {
        let mask = if k < t.mask_rois {
            let grown = expand_box(&b, &cfg.expansion())?;
            clip_box(&grown, h, w).ok().map(|e| (e, mask_target(&sample.mask, &e, n)))
        } else {
            None
        };
        rois.push(RoiTarget {
            bbox: b,
            target: HeadTarget {
                is_lesion: true,
                deltas: encode_box_deltas(&b, &gts[gi]),
            },
            mask,
        });
    }
    rois.extend(rneg[..n_neg].iter().map(|&b| RoiTarget {
        bbox: b,
        target: HeadTarget {
            is_lesion: false,
            deltas: [0.0; 4],
        },
        mask: None,
    }));
    Ok(StepPlan { rpn, rois })
}

/// Binary cross-entropy on a logit and its derivative.
fn bce_logit(l: f64, positive: bool) -> (f64, f64) {
    let y = f64::from(u8::from(positive));
    let loss = l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
    (loss, sigmoid_scalar(l) - y)
}

fn loss_grad(
    fwd: &Forward,
    w: &PipelineWeights,
    plan: &StepPlan,
    cfg: &PipelineConfig,
    want_grad: bool,
) -> Result<(LossParts, Option<PipelineWeights>)> {
    let features = &fwd.trace.features;
    let (_, fh, fw) = fwd.logits.dims3()?;
    let mut parts = LossParts::default();
    let mut g_logits = Tensor::zeros(fwd.logits.shape());
    let mut g_deltas = Tensor::zeros(fwd.deltas.shape());
    let mut g_feat = Tensor::zeros(features.shape());
    let mut grads = w.zeros_like();

    if !plan.rpn.is_empty() {
        let inv = 1.0 / plan.rpn.len() as f64;
        let n_pos = plan.rpn.iter().filter(|r| r.positive).count().max(1);
        let inv_pos = 1.0 / n_pos as f64;
        let cells = fh * fw;
        for r in &plan.rpn {
            let (a, y, x) = (r.index / cells, (r.index % cells) / fw, r.index % fw);
            let (l, g) = bce_logit(fwd.logits.at3(a, y, x), r.positive);
            parts.rpn_cls += l * inv;
            *g_logits.at3_mut(a, y, x) += g * inv;
            if r.positive {
                let d = anchor_deltas(&fwd.deltas, r.index, fh, fw);
                for j in 0..4 {
                    let e = d[j] - r.deltas[j];
                    parts.rpn_box += smooth_l1(e) * inv_pos;
                    *g_deltas.at3_mut(a * 4 + j, y, x) += smooth_l1_grad(e) * inv_pos;
                }
            }
        }
    }

    let scale = 1.0 / cfg.stride() as f64;
    let spec1 = RoiAlignSpec::new(cfg.pool, cfg.pool, scale);
    let n = cfg.roi2_size();
    let spec2 = RoiAlignSpec::new(n, n, scale);
    let n_mask = plan.rois.iter().filter(|r| r.mask.is_some()).count();
    for r in &plan.rois {
        let patch = roialign(features, &r.bbox, &spec1)?;
        let out = head_forward(&patch, &w.head)?;
        let weight = 1.0 / plan.rois.len() as f64;
        let (l, g_patch) = head_loss_backward(&out, &r.target, &w.head, weight, &mut grads.head);
        parts.head += l;
        if want_grad {
            roialign_backward(&mut g_feat, &r.bbox, &spec1, &g_patch)?;
        }
        if let Some((e, target)) = &r.mask {
            let patch2 = roialign(features, e, &spec2)?;
            let f = lrs_forward(&patch2, &w.lrs, n)?;
            let weight = 1.0 / n_mask as f64;
            parts.mask += mask_bce_loss(&f.prob, target)? * weight;
            if want_grad {
                let mut gl = mask_bce_grad_logits(&f.prob, target)?;
                gl.data_mut().iter_mut().for_each(|v| *v *= weight);
                let gp = lrs_backward(&f, &w.lrs, &gl, &mut grads.lrs)?;
                roialign_backward(&mut g_feat, e, &spec2, &gp)?;
            }
        }
    }
    if !want_grad {
        return Ok((parts, None));
    }

    let gc = conv2d_backward(features, &w.rpn_cls, &g_logits)?;
    let gb = conv2d_backward(features, &w.rpn_box, &g_deltas)?;
    grads.rpn_cls.weight = gc.weight;
    grads.rpn_cls.bias = gc.bias;
    grads.rpn_box.weight = gb.weight;
    grads.rpn_box.bias = gb.bias;
    g_feat.add_assign(&gc.input);
    g_feat.add_assign(&gb.input);
    backbone_backward(&fwd.trace, &w.backbone, g_feat, &mut grads.backbone)?;
    Ok((parts, Some(grads)))
}

/// Samples a plan for `sample` under the current weights.
pub fn plan_step(sample: &TrainSample, w: &PipelineWeights, cfg: &PipelineConfig, rng: &mut impl Rng) -> Result<StepPlan> {
    plan_from(&forward(sample, w, cfg)?, sample, cfg, rng)
}

pub fn step_loss(sample: &TrainSample, w: &PipelineWeights, plan: &StepPlan, cfg: &PipelineConfig) -> Result<LossParts> {
    Ok(loss_grad(&forward(sample, w, cfg)?, w, plan, cfg, false)?.0)
}

pub fn step_grad(
    sample: &TrainSample,
    w: &PipelineWeights,
    plan: &StepPlan,
    cfg: &PipelineConfig,
) -> Result<(LossParts, PipelineWeights)> {
    let (p, g) = loss_grad(&forward(sample, w, cfg)?, w, plan, cfg, true)?;
    Ok((p, g.expect("gradients requested")))
}

/// Plans and differentiates one step with a single forward pass.
fn train_step(
    sample: &TrainSample,
    w: &PipelineWeights,
    cfg: &PipelineConfig,
    rng: &mut impl Rng,
) -> Result<(LossParts, PipelineWeights)> {
    let fwd = forward(sample, w, cfg)?;
    let plan = plan_from(&fwd, sample, cfg, rng)?;
    let (p, g) = loss_grad(&fwd, w, &plan, cfg, true)?;
    Ok((p, g.expect("gradients requested")))
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Weights of the epoch with the lowest validation loss, at file precision.
    pub weights: PipelineWeights,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// `epoch,train_loss,val_loss,lr`
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr).unwrap();
    }
    s
}

fn validation_loss(val: &[SliceRecord], w: &PipelineWeights, cfg: &PipelineConfig) -> Result<f64> {
    let mut total = 0.0;
    for (i, rec) in val.iter().enumerate() {
        let sample = make_sample(rec, cfg, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 << 32 | i as u64);
        let fwd = forward(&sample, w, cfg)?;
        let plan = plan_from(&fwd, &sample, cfg, &mut rng)?;
        total += loss_grad(&fwd, w, &plan, cfg, false)?.0.total();
    }
    Ok(total / val.len() as f64)
}

/// Trains from a seeded initialization for `cfg.sgd.max_epochs` epochs and
/// returns the weights with the best validation loss. With
/// `checkpoint_dir`, every epoch's weights are written as
/// `epoch_NNN.rsw`.
pub fn train(
    train: &[SliceRecord],
    val: &[SliceRecord],
    cfg: &PipelineConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = PipelineWeights::init(cfg, &mut rng);
    rng.set_stream(1);
    let mut opt = Sgd::new(&cfg.sgd);
    let mut schedule = PlateauSchedule::new(cfg.sgd.patience, cfg.sgd.lr_factor);
    let frozen = |name: &str| cfg.trainer.freeze.iter().any(|p| name.starts_with(p.as_str()));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0, w.clone());

    for epoch in 1..=cfg.sgd.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let rec = if cfg.trainer.augment {
                augment(&train[i], &cfg.augment, &mut rng)?
            } else {
                train[i].clone()
            };
            let sample = make_sample(&rec, cfg, Some(&mut rng))?;
            let (parts, grads) = train_step(&sample, &w, cfg, &mut rng)?;
            let loss = parts.total();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("training loss {loss} ({parts:?}) on {}", train[i].label()),
                });
            }
            total += loss;
            opt.step_filtered(&mut w, &grads, |n| !frozen(n));
        }
        let val_loss = validation_loss(val, &w, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: order.len(),
                detail: format!("validation loss {val_loss}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            lr: opt.lr,
        });
        let mut snapshot = w.clone();
        snapshot.quantize();
        if let Some(dir) = checkpoint_dir {
            snapshot.save(&dir.join(format!("epoch_{epoch:03}.rsw")))?;
        }
        if val_loss < best.0 {
            best = (val_loss, epoch, snapshot);
        }
        opt.lr = schedule.observe(val_loss, opt.lr);
    }
    Ok(TrainReport {
        weights: best.2,
        history,
        best_epoch: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_slice, SynthConfig};
    use crate::gradcheck::relative_error;
    use crate::pipeline::config::BackboneConfig;
    use crate::lrs::TrainConfig;

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            backbone: BackboneConfig {
                widths: vec![4, 6],
                feature_channels: 6,
            },
            pool: 3,
            head_hidden: 8,
            lrs_hidden: 4,
            k: 1.3,
            ..PipelineConfig::default()
        }
    }

    fn synth(n: usize, size: usize) -> Vec<SliceRecord> {
        let s = SynthConfig {
            size,
            lesions: (1, 3),
            radius: (1.5, 4.0),
            contrast: (0.4, 0.8),
            n_subjects: 1,
            slices_per_subject: n,
            seed: 11,
            ..SynthConfig::default()
        };
        (0..n).map(|i| synth_slice(&s, 0, i).unwrap().0).collect()
    }

    #[test]
    fn components_are_eight_connected() {
        let mut m = Mask::empty(6, 7);
        for (y, x) in [(0, 0), (1, 1), (2, 2), (4, 5), (4, 6), (5, 5)] {
            m.set(y, x, true);
        }
        assert_eq!(
            component_boxes(&m),
            vec![BBox::new(0.0, 0.0, 3.0, 3.0), BBox::new(4.0, 5.0, 6.0, 7.0)]
        );
        assert!(component_boxes(&Mask::empty(3, 3)).is_empty());
    }

    #[test]
    fn mask_target_reads_bin_centers() {
        let mut m = Mask::empty(8, 8);
        m.set(2, 3, true);
        let t = mask_target(&m, &BBox::new(2.0, 2.0, 4.0, 4.0), 4);
        // bins (0..2, 2..4) cover pixel (2, 3)
        let on: Vec<usize> = (0..16).filter(|&i| t.data()[i] == 1.0).collect();
        assert_eq!(on, vec![2, 3, 6, 7]);
    }

    #[test]
    fn crops_stay_on_grid() {
        let cfg = PipelineConfig {
            trainer: crate::pipeline::config::TrainerConfig {
                crop: 32,
                ..Default::default()
            },
            ..tiny()
        };
        let rec = &synth(1, 64)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = make_sample(rec, &cfg, Some(&mut rng)).unwrap();
            assert_eq!(s.image.shape(), &[1, 32, 32]);
        }
        let a = make_sample(rec, &cfg, None).unwrap();
        let b = make_sample(rec, &cfg, None).unwrap();
        assert_eq!(a.image, b.image);
        assert!(a.mask.count() > 0);
    }

    /// Central differences of the whole multi-task loss under a fixed plan.
    #[test]
    fn joint_gradient_matches_finite_differences() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut w = PipelineWeights::init(&cfg, &mut rng);
        w.rpn_cls = w.rpn_cls.clone().he_uniform(&mut rng);
        w.rpn_box = w.rpn_box.clone().he_uniform(&mut rng);
        w.head.cls = w.head.cls.clone().uniform(0.5, &mut rng);
        w.head.bbox = w.head.bbox.clone().uniform(0.5, &mut rng);
        // zero biases leave background activations exactly on the ReLU kink
        for (name, t) in w.named_tensors_mut() {
            if name.ends_with("bias") {
                *t = Tensor::random_uniform(t.shape(), -0.1, 0.1, &mut rng);
            }
        }
        let rec = &synth(1, 32)[0];
        let sample = make_sample(rec, &cfg, None).unwrap();
        let plan = plan_step(&sample, &w, &cfg, &mut rng).unwrap();
        assert!(plan.rpn.iter().any(|r| r.positive));
        assert!(plan.rois.iter().any(|r| r.mask.is_some()));
        assert!(plan.rois.iter().any(|r| !r.target.is_lesion));

        let (parts, grads) = step_grad(&sample, &w, &plan, &cfg).unwrap();
        assert_eq!(step_loss(&sample, &w, &plan, &cfg).unwrap(), parts);
        assert!(parts.rpn_cls > 0.0 && parts.rpn_box > 0.0 && parts.head > 0.0 && parts.mask > 0.0);

        let h = crate::gradcheck::FD_STEP;
        let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut worst = (0.0, String::new());
        for (ti, name) in names.iter().enumerate() {
            let len = w.named_tensors()[ti].1.len();
            for j in (0..len).step_by((len / 6).max(1)) {
                let mut up = w.clone();
                up.named_tensors_mut()[ti].1.data_mut()[j] += h;
                let mut dn = w.clone();
                dn.named_tensors_mut()[ti].1.data_mut()[j] -= h;
                let num = (step_loss(&sample, &up, &plan, &cfg).unwrap().total()
                    - step_loss(&sample, &dn, &plan, &cfg).unwrap().total())
                    / (2.0 * h);
                let e = relative_error(grads.named_tensors()[ti].1.data()[j], num);
                if e > worst.0 {
                    worst = (e, format!("{name}[{j}]"));
                }
            }
        }
        assert!(worst.0 < 1e-5, "worst relative error {} at {}", worst.0, worst.1);
    }

    #[test]
    fn overfits_four_slices() {
        let cfg = PipelineConfig {
            backbone: BackboneConfig {
                widths: vec![6],
                feature_channels: 8,
            },
            lrs_hidden: 8,
            sgd: TrainConfig {
                lr: 0.01,
                max_epochs: 100,
                ..TrainConfig::default()
            },
            trainer: crate::pipeline::config::TrainerConfig {
                augment: false,
                ..Default::default()
            },
            ..tiny()
        };
        let data = synth(4, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = PipelineWeights::init(&cfg, &mut rng);
        let samples: Vec<TrainSample> = data.iter().map(|r| make_sample(r, &cfg, None).unwrap()).collect();
        let plans: Vec<StepPlan> = samples.iter().map(|s| plan_step(s, &w, &cfg, &mut rng).unwrap()).collect();
        let total = |w: &PipelineWeights| -> f64 {
            samples.iter().zip(&plans).map(|(s, p)| step_loss(s, w, p, &cfg).unwrap().total()).sum()
        };
        let start = total(&w);
        let mut opt = Sgd::new(&cfg.sgd);
        let mut end = start;
        for _ in 0..100 {
            for (s, p) in samples.iter().zip(&plans) {
                let (_, g) = step_grad(s, &w, p, &cfg).unwrap();
                opt.step(&mut w, &g);
            }
            end = total(&w);
            if end * 10.0 <= start {
                break;
            }
        }
        assert!(end * 10.0 <= start, "loss {start} -> {end}");
    }

    #[test]
    fn training_is_deterministic_and_checkpoints() {
        let cfg = PipelineConfig {
            sgd: TrainConfig {
                max_epochs: 2,
                ..TrainConfig::default()
            },
            trainer: crate::pipeline::config::TrainerConfig {
                crop: 32,
                ..Default::default()
            },
            ..tiny()
        };
        let data = synth(3, 48);
        let dir = tempfile::tempdir().unwrap();
        let a = train(&data[..2], &data[2..], &cfg, Some(dir.path())).unwrap();
        let b = train(&data[..2], &data[2..], &cfg, None).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
        for e in 1..=2 {
            assert!(dir.path().join(format!("epoch_{e:03}.rsw")).exists());
        }
        let best = PipelineWeights::load(&dir.path().join(format!("epoch_{:03}.rsw", a.best_epoch)), &cfg).unwrap();
        assert_eq!(best, a.weights);
        assert!(history_csv(&a.history).starts_with("epoch,train_loss,val_loss,lr\n"));
    }

    #[test]
    fn frozen_prefixes_do_not_move() {
        let cfg = PipelineConfig {
            sgd: TrainConfig {
                max_epochs: 1,
                ..TrainConfig::default()
            },
            trainer: crate::pipeline::config::TrainerConfig {
                freeze: vec!["backbone.".into(), "lrs.".into()],
                ..Default::default()
            },
            ..tiny()
        };
        let data = synth(2, 32);
        let out = train(&data[..1], &data[1..], &cfg, None).unwrap();
        let mut init = PipelineWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        init.quantize();
        assert_eq!(out.weights.backbone, init.backbone);
        assert_eq!(out.weights.lrs, init.lrs);
        assert_ne!(out.weights.head, init.head);
    }
}
