//! Full inference pass over one slice.

use crate::crf::{run_dcrf, CrfParams};
use crate::data::{normalize, restore_masks, SliceRecord};
use crate::error::{Result, StageContext};
use crate::head::{head_forward, refine_roi};
use crate::lrs::lrs_forward;
use crate::metrics::Mask;
use crate::proposal::{clip_box, expand_box, generate_anchors, round_box, roialign, BBox, RoiAlignSpec, ScoredProposal};
use crate::tensor::Tensor;

use super::config::PipelineConfig;
use super::model::{decode_proposals, rpn_forward, stub_backbone_forward};
use super::weights::PipelineWeights;

/// A ROI that survived the head, before CRF refinement.
#[derive(Clone, Debug)]
pub struct RoiCandidate {
    pub proposal: ScoredProposal,
    /// Lesion probability from the head.
    pub score: f64,
    pub refined: BBox,
    /// Box fed to the second RoIAlign (expanded, rounded, clipped).
    pub expanded: BBox,
    /// `(1, N, N)` output of the segmentation head.
    pub prob: Tensor,
    /// `(1, N, N)` normalized image over `expanded`, the CRF guide.
    pub image_patch: Tensor,
}

#[derive(Clone, Debug)]
pub struct SliceInference {
    pub mask: Mask,
    pub rois: Vec<RoiCandidate>,
    /// Per-ROI probability maps after the CRF, aligned with `rois`.
    pub probs: Vec<Tensor>,
}

impl SliceInference {
    pub fn boxes(&self) -> Vec<BBox> {
        self.rois.iter().map(|r| r.expanded).collect()
    }
}

/// Everything up to and including the segmentation head.
pub fn infer_rois(record: &SliceRecord, w: &PipelineWeights, cfg: &PipelineConfig) -> Result<Vec<RoiCandidate>> {
    let (h, wd) = (record.height(), record.width());
    let image = normalize(&record.image);
    let features = stub_backbone_forward(&image, w).stage("backbone")?;
    let (_, fh, fw) = features.dims3()?;
    let stride = cfg.stride();
    let (logits, deltas) = rpn_forward(&features, w).stage("proposals")?;
    let anchors = generate_anchors(fh, fw, stride, &cfg.anchors.scales, &cfg.anchors.ratios).stage("proposals")?;
    let proposals = decode_proposals(&logits, &deltas, &anchors, h, wd, cfg).stage("proposals")?;

    let spec1 = RoiAlignSpec::new(cfg.pool, cfg.pool, 1.0 / stride as f64);
    let n = cfg.roi2_size();
    let spec2 = RoiAlignSpec::new(n, n, 1.0 / stride as f64);
    let spec_img = RoiAlignSpec::new(n, n, 1.0);
    let mut out = Vec::new();
    for p in proposals {
        let patch = roialign(&features, &p.bbox, &spec1).stage("roialign1")?;
        let head = head_forward(&patch, &w.head).stage("head")?;
        let Some(refined) = refine_roi(&p.bbox, &head, cfg.detection_threshold, h, wd) else {
            continue;
        };
        let grown = if cfg.expand {
            expand_box(&refined, &cfg.expansion()).stage("expansion")?
        } else {
            round_box(&refined)
        };
        // rounding can collapse a sub-pixel box
        let Ok(expanded) = clip_box(&grown, h, wd) else {
            continue;
        };
        let patch2 = roialign(&features, &expanded, &spec2).stage("roialign2")?;
        let prob = lrs_forward(&patch2, &w.lrs, n).stage("segmentation head")?.prob;
        let image_patch = roialign(&image, &expanded, &spec_img).stage("dcrf")?;
        out.push(RoiCandidate {
            proposal: p,
            score: head.p_lesion,
            refined,
            expanded,
            prob,
            image_patch,
        });
    }
    Ok(out)
}

/// CRF refinement of every ROI and restoration into an `h x w` mask.
/// Returns the mask and the refined per-ROI maps.
pub fn refine_and_restore(
    rois: &[RoiCandidate],
    crf: Option<&CrfParams>,
    h: usize,
    w: usize,
    threshold: f64,
) -> Result<(Mask, Vec<Tensor>)> {
    let mut probs = Vec::with_capacity(rois.len());
    for r in rois {
        probs.push(match crf {
            Some(p) => run_dcrf(&r.prob, &r.image_patch, p).stage("dcrf")?,
            None => r.prob.clone(),
        });
    }
    let pasted: Vec<(BBox, Tensor)> = rois.iter().map(|r| r.expanded).zip(probs.iter().cloned()).collect();
    let mask = restore_masks(&pasted, h, w, threshold).stage("restore")?;
    Ok((mask, probs))
}

pub fn infer_slice(record: &SliceRecord, w: &PipelineWeights, cfg: &PipelineConfig) -> Result<SliceInference> {
    let rois = infer_rois(record, w, cfg)?;
    let crf = cfg.dcrf.then_some(&cfg.crf);
    let (mask, probs) = refine_and_restore(&rois, crf, record.height(), record.width(), cfg.mask_threshold)?;
    Ok(SliceInference { mask, rois, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_slice, SynthConfig};
    use crate::pipeline::config::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            backbone: BackboneConfig {
                widths: vec![4, 8],
                feature_channels: 8,
            },
            head_hidden: 16,
            lrs_hidden: 6,
            ..PipelineConfig::default()
        }
    }

    fn slice() -> SliceRecord {
        let s = SynthConfig {
            size: 64,
            lesions: (3, 3),
            radius: (2.0, 4.0),
            ..SynthConfig::default()
        };
        synth_slice(&s, 0, 0).unwrap().0
    }

    /// Random weights with a positive objectness and lesion bias so that
    /// every stage is exercised.
    fn eager(cfg: &PipelineConfig, seed: u64) -> PipelineWeights {
        let mut w = PipelineWeights::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        w.rpn_cls.bias.data_mut().fill(0.5);
        w.head.cls.bias.data_mut()[1] = 3.0;
        w
    }

    #[test]
    fn no_surviving_proposal_gives_empty_mask() {
        let cfg = tiny();
        let mut w = eager(&cfg, 1);
        w.rpn_cls.bias.data_mut().fill(-1e3);
        let out = infer_slice(&slice(), &w, &cfg).unwrap();
        assert!(out.rois.is_empty());
        assert!(out.mask.is_empty());
    }

    #[test]
    fn deterministic_and_capped() {
        let cfg = tiny();
        let w = eager(&cfg, 2);
        let rec = slice();
        let a = infer_slice(&rec, &w, &cfg).unwrap();
        let b = infer_slice(&rec, &w, &cfg).unwrap();
        assert!(!a.rois.is_empty());
        assert!(a.rois.len() <= 50);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.boxes(), b.boxes());
        for (p, q) in a.probs.iter().zip(&b.probs) {
            assert_eq!(p, q);
        }
        for r in &a.rois {
            assert_eq!(r.prob.shape(), &[1, 18, 18]);
            assert!(r.expanded.y1 >= 0.0 && r.expanded.x2 <= 64.0);
        }
    }

    #[test]
    fn zero_pairwise_crf_equals_no_crf() {
        let mut cfg = tiny();
        let w = eager(&cfg, 3);
        let rec = slice();
        cfg.dcrf = false;
        let off = infer_slice(&rec, &w, &cfg).unwrap();
        cfg.dcrf = true;
        cfg.crf = CrfParams {
            w_app: 0.0,
            w_smooth: 0.0,
            ..CrfParams::default()
        };
        let zero = infer_slice(&rec, &w, &cfg).unwrap();
        assert!(!off.mask.is_empty());
        assert_eq!(off.mask, zero.mask);
    }

    #[test]
    fn unit_expansion_equals_no_expansion() {
        let mut cfg = tiny();
        cfg.k = 1.0;
        let w = eager(&cfg, 4);
        let rec = slice();
        let a = infer_slice(&rec, &w, &cfg).unwrap();
        cfg.expand = false;
        let b = infer_slice(&rec, &w, &cfg).unwrap();
        assert!(!a.rois.is_empty());
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.boxes(), b.boxes());
    }
}
