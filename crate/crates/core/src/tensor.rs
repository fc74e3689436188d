//! Dense row-major `f64` tensors and the handful of kernels the pipeline
//! needs: 2-D convolution (forward and backward), activations and bilinear
//! resampling.
//!
//! Coordinates are `(row y, col x)` with the origin at the center of pixel
//! `(0, 0)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense N-dimensional array stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a (C, H, W) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn at3_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        &mut self.data[(c * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Channel `c` of a `(C, H, W)` tensor as a slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, other: &Tensor, s: f64) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Horizontal (last-axis) mirror.
    pub fn flip_x(&self) -> Self {
        let w = *self.shape.last().unwrap();
        let mut out = self.clone();
        for (dst, src) in out.data.chunks_mut(w).zip(self.data.chunks(w)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }
}

/// 2-D convolution layer (cross-correlation) with zero padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `(out_ch, in_ch, kh, kw)`
    pub weight: Tensor,
    /// `(out_ch)`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, in_ch, k, k]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    /// "Same" convolution: odd kernel, stride 1, padding `(k - 1) / 2`.
    pub fn same(out_ch: usize, in_ch: usize, k: usize) -> Self {
        debug_assert!(k % 2 == 1);
        Self::zeros(out_ch, in_ch, k, 1, (k - 1) / 2)
    }

    /// He-uniform initialization of the weights; biases are zeroed.
    pub fn he_uniform(mut self, rng: &mut impl Rng) -> Self {
        let fan_in = self.in_ch() * self.kh() * self.kw();
        let limit = (6.0 / fan_in as f64).sqrt();
        for w in self.weight.data_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        for b in self.bias.data_mut() {
            *b = 0.0;
        }
        self
    }

    pub fn out_ch(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_ch(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn kh(&self) -> usize {
        self.weight.shape()[2]
    }
    pub fn kw(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kh() || pw < self.kw() || self.stride == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} (padding {}) too small for {}x{} kernel",
                self.padding,
                self.kh(),
                self.kw()
            )));
        }
        Ok((
            (ph - self.kh()) / self.stride + 1,
            (pw - self.kw()) / self.stride + 1,
        ))
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let (c, h, w) = input.dims3()?;
        if c != self.in_ch() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch()
            )));
        }
        if self.bias.len() != self.out_ch() {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output channels",
                self.bias.len(),
                self.out_ch()
            )));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((c, h, w, oh, ow))
    }

    fn is_pointwise(&self) -> bool {
        self.kh() == 1 && self.kw() == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `C = A (m x k) * B (k x n) + beta * C`, all row-major and contiguous.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `input` into a `(C*kh*kw, oh*ow)` patch matrix.
fn im2col(input: &Tensor, layer: &ConvLayer, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, s, p) = (layer.kh(), layer.kw(), layer.stride, layer.padding as isize);
    let mut cols = vec![0.0; c * kh * kw * oh * ow];
    let src = input.data();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the input grid.
fn col2im(cols: &[f64], layer: &ConvLayer, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (kh, kw, s, p) = (layer.kh(), layer.kw(), layer.stride, layer.padding as isize);
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of a `(C, H, W)` input with `layer`.
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (c, _, _, oh, ow) = layer.check_input(input)?;
    let o = layer.out_ch();
    let kdim = c * layer.kh() * layer.kw();
    let n = oh * ow;

    let mut out = vec![0.0; o * n];
    for (oc, row) in out.chunks_mut(n).enumerate() {
        row.fill(layer.bias.data()[oc]);
    }
    if layer.is_pointwise() {
        gemm(o, kdim, n, layer.weight.data(), false, input.data(), false, &mut out, 1.0);
    } else {
        let cols = im2col(input, layer, oh, ow);
        gemm(o, kdim, n, layer.weight.data(), false, &cols, false, &mut out, 1.0);
    }
    Tensor::new(vec![o, oh, ow], out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, layer: &ConvLayer, grad_out: &Tensor) -> Result<ConvGrads> {
    let (c, h, w, oh, ow) = layer.check_input(input)?;
    let o = layer.out_ch();
    if grad_out.shape() != [o, oh, ow] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match conv output [{o}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let kdim = c * layer.kh() * layer.kw();
    let n = oh * ow;
    let g = grad_out.data();

    let grad_bias: Vec<f64> = g.chunks(n).map(|row| row.iter().sum()).collect();

    let mut grad_w = vec![0.0; o * kdim];
    let mut grad_cols = vec![0.0; kdim * n];
    if layer.is_pointwise() {
        gemm(o, n, kdim, g, false, input.data(), true, &mut grad_w, 0.0);
        gemm(kdim, o, n, layer.weight.data(), true, g, false, &mut grad_cols, 0.0);
        return Ok(ConvGrads {
            input: Tensor::new(vec![c, h, w], grad_cols)?,
            weight: Tensor::new(layer.weight.shape().to_vec(), grad_w)?,
            bias: Tensor::new(vec![o], grad_bias)?,
        });
    }
    let cols = im2col(input, layer, oh, ow);
    gemm(o, n, kdim, g, false, &cols, true, &mut grad_w, 0.0);
    gemm(kdim, o, n, layer.weight.data(), true, g, false, &mut grad_cols, 0.0);
    let grad_in = col2im(&grad_cols, layer, c, h, w, oh, ow);

    Ok(ConvGrads {
        input: Tensor::new(vec![c, h, w], grad_in)?,
        weight: Tensor::new(layer.weight.shape().to_vec(), grad_w)?,
        bias: Tensor::new(vec![o], grad_bias)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its input `x`.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// The four lattice neighbours of `(y, x)` and their bilinear weights, with
/// coordinates clamped to the valid border. Indices are into one `H x W` plane.
#[inline]
pub fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * w + x1, (1.0 - ly) * lx),
        (y1 * w + x0, ly * (1.0 - lx)),
        (y1 * w + x1, ly * lx),
    ]
}

/// Bilinear lookup of every channel of `map` at `(y, x)`; out-of-range
/// coordinates clamp to the border.
pub fn bilinear_sample(map: &Tensor, y: f64, x: f64) -> Result<Vec<f64>> {
    let (c, h, w) = map.dims3()?;
    let taps = bilinear_taps(h, w, y, x);
    Ok((0..c)
        .map(|ci| {
            let plane = map.channel(ci);
            taps.iter().map(|&(i, wt)| wt * plane[i]).sum()
        })
        .collect())
}

/// Align-corners source coordinate for output index `i`.
#[inline]
fn align_corners_src(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Resamples every channel to `out_h x out_w` on an align-corners grid.
pub fn resize_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} must be at least 1x1"
        )));
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for oy in 0..out_h {
        let sy = align_corners_src(oy, h, out_h);
        for ox in 0..out_w {
            let sx = align_corners_src(ox, w, out_w);
            let taps = bilinear_taps(h, w, sy, sx);
            for ci in 0..c {
                let plane = map.channel(ci);
                *out.at3_mut(ci, oy, ox) = taps.iter().map(|&(i, wt)| wt * plane[i]).sum();
            }
        }
    }
    Ok(out)
}

/// A collection of named trainable tensors. Gradients are carried in a value
/// of the same type so optimizers can walk parameters and gradients in step.
pub trait ParamSet {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Same structure with every element zeroed.
    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        for ((_, dst), (_, src)) in self.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += scale * s;
            }
        }
    }
}

impl ParamSet for ConvLayer {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Prefixes every tensor name of `inner` with `prefix.`.
pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    inner.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, inner: Vec<(String, &'a mut Tensor)>) -> Vec<(String, &'a mut Tensor)> {
    inner.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop cross-correlation.
    fn conv_oracle(input: &Tensor, layer: &ConvLayer) -> Tensor {
        let (c, h, w) = input.dims3().unwrap();
        let (oh, ow) = layer.output_hw(h, w).unwrap();
        let (o, kh, kw) = (layer.out_ch(), layer.kh(), layer.kw());
        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = layer.bias.data()[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * layer.stride + ky) as isize - layer.padding as isize;
                                let ix = (ox * layer.stride + kx) as isize - layer.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += layer.weight.data()[((oc * c + ic) * kh + ky) * kw + kx]
                                        * input.at3(ic, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    *out.at3_mut(oc, oy, ox) = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_multiply_add() {
        let input = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let mut layer = ConvLayer::zeros(1, 1, 1, 1, 0);
        layer.weight.data_mut()[0] = 2.0;
        layer.bias.data_mut()[0] = 1.0;
        let out = conv2d_forward(&input, &layer).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn conv_counts_overlapping_ones() {
        let input = Tensor::full(&[1, 3, 3], 1.0);
        let mut layer = ConvLayer::same(1, 1, 3);
        layer.weight.data_mut().fill(1.0);
        let out = conv2d_forward(&input, &layer).unwrap();
        assert_eq!(out.at3(0, 1, 1), 9.0);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at3(0, y, x), 4.0);
        }
        assert_eq!(out.at3(0, 0, 1), 6.0);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(c, o, k, s, p, hw) in &[
            (2, 3, 3, 1, 1, 8),
            (2, 2, 3, 2, 1, 8),
            (4, 5, 3, 1, 1, 16),
            (3, 2, 1, 1, 0, 5),
            (1, 2, 5, 2, 0, 11),
        ] {
            let input = Tensor::random_uniform(&[c, hw, hw], -1.0, 1.0, &mut rng);
            let mut layer = ConvLayer::zeros(o, c, k, s, p);
            layer.weight = Tensor::random_uniform(layer.weight.shape(), -1.0, 1.0, &mut rng);
            layer.bias = Tensor::random_uniform(&[o], -1.0, 1.0, &mut rng);
            let fast = conv2d_forward(&input, &layer).unwrap();
            let slow = conv_oracle(&input, &layer);
            assert!(fast.max_abs_diff(&slow) <= 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let layer = ConvLayer::same(1, 3, 3);
        assert!(matches!(conv2d_forward(&input, &layer), Err(Error::Shape(_))));
        let bad = Tensor::zeros(&[1, 3, 3]);
        let ok_layer = ConvLayer::same(1, 2, 3);
        assert!(conv2d_backward(&input, &ok_layer, &bad).is_err());
    }

    #[test]
    fn conv_backward_scalar_case() {
        let input = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let mut layer = ConvLayer::zeros(1, 1, 1, 1, 0);
        layer.weight.data_mut()[0] = 2.0;
        let g = conv2d_backward(&input, &layer, &Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.weight.data(), &[3.0]);
        assert_eq!(g.input.data(), &[2.0]);
        assert_eq!(g.bias.data(), &[1.0]);
    }

    #[test]
    fn conv_backward_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::random_uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let layer = ConvLayer::same(3, 2, 3).he_uniform(&mut rng);
        let g = conv2d_backward(&input, &layer, &Tensor::zeros(&[3, 5, 5])).unwrap();
        assert!(g.input.data().iter().chain(g.weight.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn activations() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::zeros(&[1])).data(), &[0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v: f64 = rng.gen_range(-30.0..30.0);
            assert!((sigmoid_scalar(-v) - (1.0 - sigmoid_scalar(v))).abs() < 1e-15);
        }
    }

    fn grid() -> Tensor {
        Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn bilinear_lattice_and_midpoint() {
        assert_eq!(bilinear_sample(&grid(), 0.0, 1.0).unwrap(), vec![1.0]);
        assert_eq!(bilinear_sample(&grid(), 0.5, 0.5).unwrap(), vec![1.5]);
        assert_eq!(bilinear_sample(&grid(), -5.0, -5.0).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&grid(), 9.0, 9.0).unwrap(), vec![3.0]);
    }

    #[test]
    fn resize_identity_constant_and_center() {
        let g = grid();
        assert_eq!(resize_bilinear(&g, 2, 2).unwrap(), g);
        let up = resize_bilinear(&g, 3, 3).unwrap();
        assert_eq!(up.at3(0, 1, 1), 1.5);
        let c = Tensor::full(&[2, 3, 5], 4.25);
        let r = resize_bilinear(&c, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| v == 4.25));
        assert_eq!(resize_bilinear(&g, 1, 1).unwrap().data(), &[1.5]);
        assert!(resize_bilinear(&g, 0, 3).is_err());
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::zeros(&[4]).dims3().is_err());
    }

    proptest::proptest! {
        #[test]
        fn bilinear_within_neighbour_range(vals in proptest::collection::vec(-10.0f64..10.0, 12), y in 0.0f64..2.0, x in 0.0f64..3.0) {
            let map = Tensor::new(vec![1, 3, 4], vals).unwrap();
            let v = bilinear_sample(&map, y, x).unwrap()[0];
            let taps = bilinear_taps(3, 4, y, x);
            let lo = taps.iter().map(|t| map.data()[t.0]).fold(f64::INFINITY, f64::min);
            let hi = taps.iter().map(|t| map.data()[t.0]).fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
