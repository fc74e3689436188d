//! Central finite-difference checks of the analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::head::{head_forward, head_loss_backward, HeadTarget, HeadWeights, Linear};
use crate::lrs::{lrs_backward, lrs_forward, mask_bce_grad, mask_bce_grad_logits, mask_bce_loss, LrsWeights};
use crate::tensor::{conv2d_backward, conv2d_forward, sigmoid, ConvLayer, ParamSet, Tensor};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl GradReport {
    fn merge(name: &str, parts: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let (checked, max_rel_error) = parts
            .into_iter()
            .fold((0, 0.0f64), |(n, m), (c, e)| (n + c, m.max(e)));
        Self {
            name: name.into(),
            checked,
            max_rel_error,
        }
    }
}

/// Compares `analytic` with central differences of `loss` at up to
/// `samples` random coordinates of `x`. Returns `(checked, max error)`.
pub fn check_tensor(
    x: &Tensor,
    analytic: &Tensor,
    mut loss: impl FnMut(&Tensor) -> f64,
    samples: usize,
    rng: &mut impl Rng,
) -> (usize, f64) {
    let idx = sample(rng, x.len(), samples.min(x.len()));
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in idx.iter() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + FD_STEP;
        let up = loss(&probe);
        probe.data_mut()[i] = v - FD_STEP;
        let down = loss(&probe);
        probe.data_mut()[i] = v;
        worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    (idx.len(), worst)
}

/// [`check_tensor`] over every named tensor of a parameter set.
pub fn check_params<P: ParamSet + Clone>(
    params: &P,
    analytic: &P,
    mut loss: impl FnMut(&P) -> f64,
    samples_per_tensor: usize,
    rng: &mut impl Rng,
) -> (usize, f64) {
    let grads: Vec<Tensor> = analytic.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mut total = 0;
    let mut worst = 0.0f64;
    for (ti, g) in grads.iter().enumerate() {
        let base = params.named_tensors()[ti].1.clone();
        let (n, e) = check_tensor(
            &base,
            g,
            |t| {
                let mut p = params.clone();
                *p.named_tensors_mut()[ti].1 = t.clone();
                loss(&p)
            },
            samples_per_tensor,
            rng,
        );
        total += n;
        worst = worst.max(e);
    }
    (total, worst)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn conv_case(name: &str, layer: ConvLayer, in_shape: [usize; 3], rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut layer = layer.he_uniform(rng);
    layer.bias = Tensor::random_uniform(layer.bias.shape(), -0.5, 0.5, rng);
    let x = Tensor::random_uniform(&in_shape, -1.0, 1.0, rng);
    let y = conv2d_forward(&x, &layer)?;
    let r = Tensor::random_uniform(y.shape(), -1.0, 1.0, rng);
    let g = conv2d_backward(&x, &layer, &r)?;
    let dx = check_tensor(&x, &g.input, |t| dot(&conv2d_forward(t, &layer).unwrap(), &r), 60, rng);
    let mut lw = layer.clone();
    let dw = check_tensor(
        &layer.weight,
        &g.weight,
        |t| {
            lw.weight = t.clone();
            dot(&conv2d_forward(&x, &lw).unwrap(), &r)
        },
        60,
        rng,
    );
    let mut lb = layer.clone();
    let db = check_tensor(
        &layer.bias,
        &g.bias,
        |t| {
            lb.bias = t.clone();
            dot(&conv2d_forward(&x, &lb).unwrap(), &r)
        },
        60,
        rng,
    );
    Ok(GradReport::merge(name, [dx, dw, db]))
}

fn linear_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let l = Linear::zeros(7, 11).he_uniform(rng);
    let x = Tensor::random_uniform(&[11], -1.0, 1.0, rng);
    let r: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = |l: &Linear, x: &[f64]| -> f64 { l.forward(x).unwrap().iter().zip(&r).map(|(a, b)| a * b).sum() };
    let mut grads = l.zeros_like();
    let gx = l.backward(x.data(), &r, &mut grads);
    let gx = Tensor::new(vec![11], gx)?;
    let a = check_tensor(&x, &gx, |t| f(&l, t.data()), 11, rng);
    let b = check_params(&l, &grads, |p| f(p, x.data()), 40, rng);
    Ok(GradReport::merge("head fully connected layer", [a, b]))
}

fn head_case(rng: &mut ChaCha8Rng, is_lesion: bool) -> Result<GradReport> {
    let (c, pool, hidden) = (3, 7, 16);
    let mut w = HeadWeights::init(c, pool, hidden, rng);
    // larger output layers so both loss terms carry signal
    w.cls = w.cls.clone().uniform(0.5, rng);
    w.bbox = w.bbox.clone().uniform(0.5, rng);
    for b in [&mut w.fc1.bias, &mut w.fc2.bias] {
        *b = Tensor::random_uniform(b.shape(), 0.0, 0.2, rng);
    }
    let patch = Tensor::random_uniform(&[c, pool, pool], -1.0, 1.0, rng);
    let target = HeadTarget {
        is_lesion,
        deltas: [
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        ],
    };
    let weight = 0.7;
    let loss = |w: &HeadWeights, p: &Tensor| -> f64 {
        let out = head_forward(p, w).unwrap();
        let mut scratch = w.zeros_like();
        head_loss_backward(&out, &target, w, weight, &mut scratch).0
    };
    let out = head_forward(&patch, &w)?;
    let mut grads = w.zeros_like();
    let (_, g_patch) = head_loss_backward(&out, &target, &w, weight, &mut grads);
    let a = check_tensor(&patch, &g_patch, |t| loss(&w, t), 60, rng);
    let b = check_params(&w, &grads, |p| loss(p, &patch), 30, rng);
    let name = if is_lesion {
        "combined head loss (lesion ROI)"
    } else {
        "combined head loss (background ROI)"
    };
    Ok(GradReport::merge(name, [a, b]))
}

fn bce_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let pred = Tensor::random_uniform(&[1, 6, 6], 0.05, 0.95, rng);
    let target = Tensor::from_fn(&[1, 6, 6], |_| f64::from(u8::from(rng.gen_bool(0.4))));
    let g = mask_bce_grad(&pred, &target)?;
    let a = check_tensor(&pred, &g, |t| mask_bce_loss(t, &target).unwrap(), 36, rng);
    let logits = Tensor::random_uniform(&[1, 6, 6], -3.0, 3.0, rng);
    let gl = mask_bce_grad_logits(&sigmoid(&logits), &target)?;
    let b = check_tensor(&logits, &gl, |t| mask_bce_loss(&sigmoid(t), &target).unwrap(), 36, rng);
    Ok(GradReport::merge("mask binary cross-entropy", [a, b]))
}

fn lrs_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let w = LrsWeights::init(256, 8, rng);
    let patch = Tensor::random_uniform(&[256, 4, 4], -1.0, 1.0, rng);
    let target = Tensor::from_fn(&[1, 4, 4], |_| f64::from(u8::from(rng.gen_bool(0.3))));
    let loss = |w: &LrsWeights, p: &Tensor| mask_bce_loss(&lrs_forward(p, w, 4).unwrap().prob, &target).unwrap();
    let fwd = lrs_forward(&patch, &w, 4)?;
    let gl = mask_bce_grad_logits(&fwd.prob, &target)?;
    let mut grads = w.zeros_like();
    let g_patch = lrs_backward(&fwd, &w, &gl, &mut grads)?;
    let a = check_tensor(&patch, &g_patch, |t| loss(&w, t), 60, rng);
    let b = check_params(&w, &grads, |p| loss(p, &patch), 30, rng);
    Ok(GradReport::merge("segmentation head with mask loss", [a, b]))
}

/// Every gradient check on random small tensors.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        conv_case("conv 3x3 same", ConvLayer::same(3, 2, 3), [2, 6, 6], &mut rng)?,
        conv_case("conv 3x3 stride 2", ConvLayer::zeros(4, 3, 3, 2, 1), [3, 7, 8], &mut rng)?,
        conv_case("conv 1x1", ConvLayer::same(5, 4, 1), [4, 5, 5], &mut rng)?,
        conv_case("conv 5x5 no padding", ConvLayer::zeros(2, 2, 5, 1, 0), [2, 7, 7], &mut rng)?,
        linear_case(&mut rng)?,
        head_case(&mut rng, true)?,
        head_case(&mut rng, false)?,
        bce_case(&mut rng)?,
        lrs_case(&mut rng)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradients_match_finite_differences() {
        for r in gradient_suite(1).unwrap() {
            assert!(r.checked > 0);
            assert!(r.max_rel_error < 1e-5, "{} max relative error {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
