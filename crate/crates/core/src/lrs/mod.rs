//! Lightweight segmentation head: two 3x3 "same" convolutions with ReLU and a
//! 1x1 convolution with sigmoid, applied to the `N x N` RoIAlign patch of an
//! expanded ROI. Also hosts the mask loss and the momentum-SGD trainer.

mod sgd;

pub use sgd::{sgd_train, EpochRecord, PlateauSchedule, Sgd, TrainConfig, TrainOutcome, Trainable};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, prefixed, prefixed_mut, relu, relu_backward, sigmoid, ConvLayer, ParamSet,
    Tensor,
};

/// Probability clamp applied before taking logs in the mask loss.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrsWeights {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
}

impl LrsWeights {
    /// `in_ch -> hidden (3x3) -> hidden (3x3) -> 1 (1x1)`, all zero.
    pub fn zeros(in_ch: usize, hidden: usize) -> Self {
        Self {
            conv1: ConvLayer::same(hidden, in_ch, 3),
            conv2: ConvLayer::same(hidden, hidden, 3),
            conv3: ConvLayer::same(1, hidden, 1),
        }
    }

    /// The 256-channel head.
    pub fn canonical() -> Self {
        Self::zeros(256, 256)
    }

    pub fn init(in_ch: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let z = Self::zeros(in_ch, hidden);
        Self {
            conv1: z.conv1.he_uniform(rng),
            conv2: z.conv2.he_uniform(rng),
            conv3: z.conv3.he_uniform(rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_ch()
    }
}

impl ParamSet for LrsWeights {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("conv1", self.conv1.named_tensors());
        v.extend(prefixed("conv2", self.conv2.named_tensors()));
        v.extend(prefixed("conv3", self.conv3.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("conv1", self.conv1.named_tensors_mut());
        v.extend(prefixed_mut("conv2", self.conv2.named_tensors_mut()));
        v.extend(prefixed_mut("conv3", self.conv3.named_tensors_mut()));
        v
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            conv3: self.conv3.zeros_like(),
        }
    }
}

/// Total number of weight and bias elements.
pub fn param_count(w: &LrsWeights) -> usize {
    ParamSet::param_count(w)
}

/// Layers of the standard Mask R-CNN mask head used as the size reference:
/// four 3x3 256->256 convolutions, a 2x2 256->256 transposed convolution and
/// a 1x1 256->1 predictor.
pub fn reference_mask_head() -> Vec<ConvLayer> {
    let mut layers: Vec<ConvLayer> = (0..4).map(|_| ConvLayer::same(256, 256, 3)).collect();
    // transposed 2x2 stride-2 convolution: (in, out, 2, 2) weights + out biases
    layers.push(ConvLayer::zeros(256, 256, 2, 2, 0));
    layers.push(ConvLayer::same(1, 256, 1));
    layers
}

pub fn reference_mask_head_param_count() -> usize {
    reference_mask_head().iter().map(|l| l.param_count()).sum()
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct LrsForward {
    pub input: Tensor,
    pub z1: Tensor,
    pub a1: Tensor,
    pub z2: Tensor,
    pub a2: Tensor,
    pub logits: Tensor,
    pub prob: Tensor,
}

/// Runs the head on a `(C, N, N)` patch; `expected_n` is the RoIAlign2 size
/// for the active expansion factor.
pub fn lrs_forward(patch: &Tensor, w: &LrsWeights, expected_n: usize) -> Result<LrsForward> {
    let (c, h, wd) = patch.dims3()?;
    if h != expected_n || wd != expected_n {
        return Err(Error::Shape(format!(
            "segmentation head expects a {expected_n}x{expected_n} patch, got {h}x{wd}"
        )));
    }
    if c != w.in_channels() {
        return Err(Error::Shape(format!(
            "segmentation head expects {} channels, got {c}",
            w.in_channels()
        )));
    }
    let z1 = conv2d_forward(patch, &w.conv1)?;
    let a1 = relu(&z1);
    let z2 = conv2d_forward(&a1, &w.conv2)?;
    let a2 = relu(&z2);
    let logits = conv2d_forward(&a2, &w.conv3)?;
    let prob = sigmoid(&logits);
    Ok(LrsForward {
        input: patch.clone(),
        z1,
        a1,
        z2,
        a2,
        logits,
        prob,
    })
}

/// Back-propagates `grad_logits` (gradient w.r.t. the pre-sigmoid output).
/// Parameter gradients are added into `grads`; returns the patch gradient.
pub fn lrs_backward(fwd: &LrsForward, w: &LrsWeights, grad_logits: &Tensor, grads: &mut LrsWeights) -> Result<Tensor> {
    let g3 = conv2d_backward(&fwd.a2, &w.conv3, grad_logits)?;
    grads.conv3.weight.add_assign(&g3.weight);
    grads.conv3.bias.add_assign(&g3.bias);
    let gz2 = relu_backward(&fwd.z2, &g3.input);
    let g2 = conv2d_backward(&fwd.a1, &w.conv2, &gz2)?;
    grads.conv2.weight.add_assign(&g2.weight);
    grads.conv2.bias.add_assign(&g2.bias);
    let gz1 = relu_backward(&fwd.z1, &g2.input);
    let g1 = conv2d_backward(&fwd.input, &w.conv1, &gz1)?;
    grads.conv1.weight.add_assign(&g1.weight);
    grads.conv1.bias.add_assign(&g1.bias);
    Ok(g1.input)
}

fn check_mask_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mask loss: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean per-pixel binary cross-entropy with the prediction clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn mask_bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_mask_pair(pred, target)?;
    let n = pred.len() as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / n)
}

/// Gradient of [`mask_bce_loss`] with respect to the prediction.
pub fn mask_bce_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_mask_pair(pred, target)?;
    let n = pred.len() as f64;
    let mut g = pred.clone();
    for (gv, &t) in g.data_mut().iter_mut().zip(target.data()) {
        let p = *gv;
        *gv = if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
            0.0
        } else {
            (-t / p + (1.0 - t) / (1.0 - p)) / n
        };
    }
    Ok(g)
}

/// Gradient of the mask loss with respect to the pre-sigmoid logits.
pub fn mask_bce_grad_logits(prob: &Tensor, target: &Tensor) -> Result<Tensor> {
    let mut g = mask_bce_grad(prob, target)?;
    for (gv, &p) in g.data_mut().iter_mut().zip(prob.data()) {
        *gv *= p * (1.0 - p);
    }
    Ok(g)
}

/// One patch and its binary mask, the unit of LRS-only training.
#[derive(Clone, Debug)]
pub struct MaskSample {
    pub patch: Tensor,
    pub target: Tensor,
}

impl Trainable for LrsWeights {
    type Sample = MaskSample;

    fn loss(&self, s: &MaskSample) -> Result<f64> {
        let n = s.patch.shape()[1];
        let f = lrs_forward(&s.patch, self, n)?;
        mask_bce_loss(&f.prob, &s.target)
    }

    fn loss_grad(&self, s: &MaskSample) -> Result<(f64, Self)> {
        let n = s.patch.shape()[1];
        let f = lrs_forward(&s.patch, self, n)?;
        let loss = mask_bce_loss(&f.prob, &s.target)?;
        let g = mask_bce_grad_logits(&f.prob, &s.target)?;
        let mut grads = self.zeros_like();
        lrs_backward(&f, self, &g, &mut grads)?;
        Ok((loss, grads))
    }
}
