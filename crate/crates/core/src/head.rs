//! Box/class refinement head fed by the first RoIAlign.
//!
//! `flatten -> fc1 -> ReLU -> fc2 -> ReLU -> {class logits, box deltas}`
//! with two classes (background, lesion).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proposal::{apply_box_deltas, clip_box, BBox, Deltas};
use crate::tensor::{prefixed, prefixed_mut, ParamSet, Tensor};

/// Fully connected layer, `weight` is `(out, in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn he_uniform(mut self, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / self.in_dim() as f64).sqrt();
        for w in self.weight.data_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        self
    }

    /// Uniform init with the given bound; used for output layers that should start small.
    pub fn uniform(mut self, limit: f64, rng: &mut impl Rng) -> Self {
        for w in self.weight.data_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        self
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!("linear layer expects {} inputs, got {}", self.in_dim(), x.len())));
        }
        let w = self.weight.data();
        Ok(self
            .bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, &b)| b + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    /// Returns the input gradient and accumulates parameter gradients into `grads`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Linear) -> Vec<f64> {
        let n = self.in_dim();
        let w = self.weight.data();
        let mut gx = vec![0.0; n];
        let gw = grads.weight.data_mut();
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for i in 0..n {
                gx[i] += g * w[o * n + i];
                gw[o * n + i] += g * x[i];
            }
        }
        for (b, g) in grads.bias.data_mut().iter_mut().zip(grad_out) {
            *b += g;
        }
        gx
    }
}

impl ParamSet for Linear {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.out_dim(), self.in_dim())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub bbox: Linear,
    /// Spatial size of the pooled input patch (7 for the canonical head).
    pub pool: usize,
    pub channels: usize,
}

impl HeadWeights {
    pub fn zeros(channels: usize, pool: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(hidden, channels * pool * pool),
            fc2: Linear::zeros(hidden, hidden),
            cls: Linear::zeros(2, hidden),
            bbox: Linear::zeros(4, hidden),
            pool,
            channels,
        }
    }

    pub fn init(channels: usize, pool: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let z = Self::zeros(channels, pool, hidden);
        Self {
            fc1: z.fc1.he_uniform(rng),
            fc2: z.fc2.he_uniform(rng),
            cls: z.cls.uniform(0.01, rng),
            bbox: z.bbox.uniform(0.001, rng),
            ..z
        }
    }
}

impl ParamSet for HeadWeights {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("fc1", self.fc1.named_tensors());
        v.extend(prefixed("fc2", self.fc2.named_tensors()));
        v.extend(prefixed("cls", self.cls.named_tensors()));
        v.extend(prefixed("bbox", self.bbox.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("fc1", self.fc1.named_tensors_mut());
        v.extend(prefixed_mut("fc2", self.fc2.named_tensors_mut()));
        v.extend(prefixed_mut("cls", self.cls.named_tensors_mut()));
        v.extend(prefixed_mut("bbox", self.bbox.named_tensors_mut()));
        v
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.pool, self.fc1.out_dim())
    }
}

/// Forward activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub p_lesion: f64,
    pub deltas: Deltas,
    pub logits: [f64; 2],
    input: Vec<f64>,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    h2_pre: Vec<f64>,
    h2: Vec<f64>,
}

fn softmax2(l: [f64; 2]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let e0 = (l[0] - m).exp();
    let e1 = (l[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

pub fn head_forward(patch: &Tensor, w: &HeadWeights) -> Result<HeadOutput> {
    if patch.shape() != [w.channels, w.pool, w.pool] {
        return Err(Error::Shape(format!(
            "head expects a [{}, {}, {}] patch, got {:?}",
            w.channels,
            w.pool,
            w.pool,
            patch.shape()
        )));
    }
    let input = patch.data().to_vec();
    let h1_pre = w.fc1.forward(&input)?;
    let h1: Vec<f64> = h1_pre.iter().map(|v| v.max(0.0)).collect();
    let h2_pre = w.fc2.forward(&h1)?;
    let h2: Vec<f64> = h2_pre.iter().map(|v| v.max(0.0)).collect();
    let l = w.cls.forward(&h2)?;
    let logits = [l[0], l[1]];
    let d = w.bbox.forward(&h2)?;
    Ok(HeadOutput {
        p_lesion: softmax2(logits)[1],
        deltas: [d[0], d[1], d[2], d[3]],
        logits,
        input,
        h1_pre,
        h1,
        h2_pre,
        h2,
    })
}

#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Training target for one ROI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadTarget {
    pub is_lesion: bool,
    /// Regression target, used only for lesion ROIs.
    pub deltas: Deltas,
}

/// Cross-entropy plus smooth-L1 box loss for one ROI, scaled by `weight`.
/// Returns the loss; gradients (also scaled) are accumulated into `grads`
/// and the gradient w.r.t. the pooled patch is returned.
pub fn head_loss_backward(
    out: &HeadOutput,
    target: &HeadTarget,
    w: &HeadWeights,
    weight: f64,
    grads: &mut HeadWeights,
) -> (f64, Tensor) {
    let p = softmax2(out.logits);
    let label = usize::from(target.is_lesion);
    let mut loss = -(p[label].max(1e-300)).ln();
    let mut g_logits = [p[0] * weight, p[1] * weight];
    g_logits[label] -= weight;

    let mut g_deltas = [0.0; 4];
    if target.is_lesion {
        for i in 0..4 {
            let r = out.deltas[i] - target.deltas[i];
            loss += smooth_l1(r);
            g_deltas[i] = smooth_l1_grad(r) * weight;
        }
    }

    let mut g_h2 = w.cls.backward(&out.h2, &g_logits, &mut grads.cls);
    let g_h2_box = w.bbox.backward(&out.h2, &g_deltas, &mut grads.bbox);
    for ((g, gb), pre) in g_h2.iter_mut().zip(g_h2_box).zip(&out.h2_pre) {
        *g = if *pre > 0.0 { *g + gb } else { 0.0 };
    }
    let mut g_h1 = w.fc2.backward(&out.h1, &g_h2, &mut grads.fc2);
    for (g, pre) in g_h1.iter_mut().zip(&out.h1_pre) {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    }
    let g_in = w.fc1.backward(&out.input, &g_h1, &mut grads.fc1);
    let g_patch = Tensor::new(vec![w.channels, w.pool, w.pool], g_in).expect("head input shape");
    (loss * weight, g_patch)
}

/// Keeps a proposal whose lesion probability clears `score_threshold` and
/// moves it by the predicted deltas, clipped to the frame.
pub fn refine_roi(proposal: &BBox, out: &HeadOutput, score_threshold: f64, img_h: usize, img_w: usize) -> Option<BBox> {
    if out.p_lesion < score_threshold {
        return None;
    }
    clip_box(&apply_box_deltas(proposal, &out.deltas), img_h, img_w).ok()
}
