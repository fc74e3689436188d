//! Forward and backward passes of the backbone and the proposal network.

use crate::error::{Error, Result};
use crate::proposal::{apply_box_deltas, clip_box, nms_capped, score_proposals, BBox, Deltas, ScoredProposal};
use crate::tensor::{conv2d_backward, conv2d_forward, relu, relu_backward, ConvLayer, Tensor};

use super::config::PipelineConfig;
use super::weights::PipelineWeights;

/// Largest log-scale box delta applied when decoding proposals.
pub const MAX_LOG_DELTA: f64 = 4.135166556742356; // ln(1000 / 16)

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    /// Input of each layer.
    pub inputs: Vec<Tensor>,
    /// Pre-activation output of each layer.
    pub pre: Vec<Tensor>,
    pub features: Tensor,
}

pub fn backbone_trace(image: &Tensor, layers: &[ConvLayer]) -> Result<BackboneTrace> {
    let (c, _, _) = image.dims3()?;
    if layers.first().map(|l| l.in_ch()) != Some(c) {
        return Err(Error::Shape(format!("backbone expects a single-channel image, got {c} channels")));
    }
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut x = image.clone();
    for l in layers {
        let z = conv2d_forward(&x, l)?;
        inputs.push(x);
        x = relu(&z);
        pre.push(z);
    }
    Ok(BackboneTrace { inputs, pre, features: x })
}

/// Stride-2 conv+ReLU blocks and a stride-1 conv+ReLU to the feature map.
pub fn stub_backbone_forward(image: &Tensor, w: &PipelineWeights) -> Result<Tensor> {
    Ok(backbone_trace(image, &w.backbone)?.features)
}

/// Accumulates layer gradients given the gradient at the feature map.
pub fn backbone_backward(trace: &BackboneTrace, layers: &[ConvLayer], grad_features: Tensor, grads: &mut [ConvLayer]) -> Result<()> {
    let mut g = grad_features;
    for i in (0..layers.len()).rev() {
        let gz = relu_backward(&trace.pre[i], &g);
        let cg = conv2d_backward(&trace.inputs[i], &layers[i], &gz)?;
        grads[i].weight.add_assign(&cg.weight);
        grads[i].bias.add_assign(&cg.bias);
        g = cg.input;
    }
    Ok(())
}

/// Objectness logits `(A, H, W)` and box deltas `(4A, H, W)`.
pub fn rpn_forward(features: &Tensor, w: &PipelineWeights) -> Result<(Tensor, Tensor)> {
    Ok((conv2d_forward(features, &w.rpn_cls)?, conv2d_forward(features, &w.rpn_box)?))
}

/// Box deltas predicted for anchor `index` of an `(A, fh, fw)` grid.
pub fn anchor_deltas(deltas: &Tensor, index: usize, fh: usize, fw: usize) -> Deltas {
    let a = index / (fh * fw);
    let r = index % (fh * fw);
    let (y, x) = (r / fw, r % fw);
    let mut d = [0.0; 4];
    for (j, v) in d.iter_mut().enumerate() {
        *v = deltas.at3(a * 4 + j, y, x);
    }
    d
}

/// ReLU scoring, delta decoding, clipping, NMS and the proposal cap.
/// Boxes that clip to nothing are dropped.
pub fn decode_proposals(
    logits: &Tensor,
    deltas: &Tensor,
    anchors: &[BBox],
    img_h: usize,
    img_w: usize,
    cfg: &PipelineConfig,
) -> Result<Vec<ScoredProposal>> {
    let (a, fh, fw) = logits.dims3()?;
    if anchors.len() != a * fh * fw {
        return Err(Error::Shape(format!("{} anchors for a {a}x{fh}x{fw} logit map", anchors.len())));
    }
    let mut out = Vec::new();
    for (index, score) in score_proposals(logits) {
        let mut d = anchor_deltas(deltas, index, fh, fw);
        d[2] = d[2].min(MAX_LOG_DELTA);
        d[3] = d[3].min(MAX_LOG_DELTA);
        if let Ok(bbox) = clip_box(&apply_box_deltas(&anchors[index], &d), img_h, img_w) {
            out.push(ScoredProposal { bbox, score, index });
        }
    }
    Ok(nms_capped(&out, cfg.nms_threshold, cfg.proposal_cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::BackboneConfig;
    use crate::tensor::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn canonical_feature_shape_and_zero_weights() {
        let cfg = PipelineConfig::default();
        let w = PipelineWeights::zeros(&cfg);
        let img = Tensor::full(&[1, 512, 512], 1.0);
        let f = stub_backbone_forward(&img, &w).unwrap();
        assert_eq!(f.shape(), &[256, 32, 32]);
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(stub_backbone_forward(&Tensor::zeros(&[2, 64, 64]), &w).is_err());
    }

    /// Layer-by-layer composition through the public tensor operations.
    #[test]
    fn forward_matches_composition() {
        let cfg = PipelineConfig {
            backbone: BackboneConfig {
                widths: vec![3, 5],
                feature_channels: 4,
            },
            ..PipelineConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = PipelineWeights::init(&cfg, &mut rng);
        for l in &mut w.backbone {
            l.bias = Tensor::random_uniform(l.bias.shape(), -0.2, 0.2, &mut rng);
        }
        let img = Tensor::random_uniform(&[1, 24, 20], -2.0, 2.0, &mut rng);
        let mut x = img.clone();
        for l in &w.backbone {
            x = relu(&conv2d_forward(&x, l).unwrap());
        }
        let f = stub_backbone_forward(&img, &w).unwrap();
        assert_eq!(f.shape(), &[4, 6, 5]);
        assert!(f.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        let cfg = PipelineConfig {
            backbone: BackboneConfig {
                widths: vec![3],
                feature_channels: 2,
            },
            ..PipelineConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = PipelineWeights::init(&cfg, &mut rng);
        let img = Tensor::random_uniform(&[1, 8, 8], -1.0, 1.0, &mut rng);
        let tr = backbone_trace(&img, &w.backbone).unwrap();
        let r = Tensor::random_uniform(tr.features.shape(), -1.0, 1.0, &mut rng);
        let mut grads: Vec<ConvLayer> = w.backbone.iter().map(ParamSet::zeros_like).collect();
        backbone_backward(&tr, &w.backbone, r.clone(), &mut grads).unwrap();
        let loss = |layers: &[ConvLayer]| -> f64 {
            let f = backbone_trace(&img, layers).unwrap().features;
            f.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for li in 0..w.backbone.len() {
            for i in 0..w.backbone[li].weight.len() {
                let mut up = w.backbone.clone();
                up[li].weight.data_mut()[i] += h;
                let mut dn = w.backbone.clone();
                dn[li].weight.data_mut()[i] -= h;
                let num = (loss(&up) - loss(&dn)) / (2.0 * h);
                let a = grads[li].weight.data()[i];
                assert!((a - num).abs() <= 1e-5 * a.abs().max(num.abs()).max(1e-8), "layer {li} weight {i}: {a} vs {num}");
            }
        }
    }

    #[test]
    fn no_positive_logit_means_no_proposal() {
        let cfg = PipelineConfig::default();
        let logits = Tensor::full(&[9, 2, 2], -0.1);
        let deltas = Tensor::zeros(&[36, 2, 2]);
        let anchors = crate::proposal::generate_anchors(2, 2, 16, &cfg.anchors.scales, &cfg.anchors.ratios).unwrap();
        assert!(decode_proposals(&logits, &deltas, &anchors, 32, 32, &cfg).unwrap().is_empty());
        let mut l = logits.clone();
        *l.at3_mut(4, 1, 0) = 2.0;
        let p = decode_proposals(&l, &deltas, &anchors, 32, 32, &cfg).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].index, (4 * 2 + 1) * 2);
        assert_eq!(p[0].bbox, anchors[p[0].index]);
    }
}
