//! Fully connected CRF over a two-label (background, lesion) field with
//! Gaussian edge potentials and Potts compatibility, solved by synchronous
//! mean-field updates.
//!
//! Two kernels act on every pixel pair `i != j`:
//!
//! * appearance: `exp(-|p_i - p_j|^2 / 2 theta_alpha^2 - (I_i - I_j)^2 / 2 theta_beta^2)`
//! * smoothness: `exp(-|p_i - p_j|^2 / 2 theta_gamma^2)`
//!
//! The update is `Q_i(l) ∝ exp(-u_i(l) - sum_m w_m sum_{j != i} k_m(i, j) Q_j(l'))`
//! with `l' != l`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest field the exact O(n^2) filter accepts.
pub const BRUTE_FORCE_MAX_PIXELS: usize = 64 * 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    /// Appearance (bilateral) kernel weight.
    pub w_app: f64,
    /// Smoothness kernel weight.
    pub w_smooth: f64,
    /// Bilateral spatial bandwidth in pixels.
    pub theta_alpha: f64,
    /// Bilateral intensity bandwidth in normalized-intensity units.
    pub theta_beta: f64,
    /// Smoothness spatial bandwidth in pixels.
    pub theta_gamma: f64,
    pub iterations: usize,
    /// Probability clamp used when building unaries.
    pub eps: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w_app: 1.0,
            w_smooth: 1.0,
            theta_alpha: 4.0,
            theta_beta: 0.5,
            theta_gamma: 1.5,
            iterations: 5,
            eps: 1e-8,
        }
    }
}

impl CrfParams {
    /// Parameters that leave the unary solution untouched.
    pub fn disabled() -> Self {
        Self {
            w_app: 0.0,
            w_smooth: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w_app >= 0.0
            && self.w_smooth >= 0.0
            && self.theta_alpha > 0.0
            && self.theta_beta > 0.0
            && self.theta_gamma > 0.0
            && self.eps > 0.0
            && self.eps < 0.5;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid CRF parameters {self:?}")))
        }
    }

    pub fn has_pairwise(&self) -> bool {
        self.w_app > 0.0 || self.w_smooth > 0.0
    }
}

/// Per-pixel marginals `(2, H, W)`: channel 0 background, channel 1 lesion.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelField {
    pub q: Tensor,
}

impl LabelField {
    /// Normalized `exp(-unary)`.
    pub fn from_unary(unary: &Tensor) -> Result<Self> {
        let (l, h, w) = unary.dims3()?;
        let mut q = Tensor::zeros(&[l, h, w]);
        let n = h * w;
        for i in 0..n {
            let m = (0..l).map(|c| -unary.data()[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..l {
                let e = (-unary.data()[c * n + i] - m).exp();
                q.data_mut()[c * n + i] = e;
                z += e;
            }
            for c in 0..l {
                q.data_mut()[c * n + i] /= z;
            }
        }
        Ok(Self { q })
    }

    /// Largest deviation of any pixel's label sum from one; negative entries
    /// are reported as infinite.
    pub fn normalization_error(&self) -> f64 {
        let (l, h, w) = self.q.dims3().expect("label field is rank 3");
        let n = h * w;
        let d = self.q.data();
        (0..n)
            .map(|i| {
                if (0..l).any(|c| d[c * n + i] < 0.0) {
                    f64::INFINITY
                } else {
                    ((0..l).map(|c| d[c * n + i]).sum::<f64>() - 1.0).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn lesion(&self) -> Tensor {
        let (_, h, w) = self.q.dims3().expect("label field is rank 3");
        Tensor::new(vec![1, h, w], self.q.channel(1).to_vec()).expect("lesion plane")
    }
}

/// `u(lesion) = -ln clamp(p)`, `u(background) = -ln clamp(1 - p)`.
pub fn unary_from_prob(prob: &Tensor, eps: f64) -> Result<Tensor> {
    let (c, h, w) = prob.dims3()?;
    if c != 1 {
        return Err(Error::Shape(format!("probability map must have one channel, got {c}")));
    }
    let n = h * w;
    let mut u = Tensor::zeros(&[2, h, w]);
    for (i, &p) in prob.data().iter().enumerate() {
        u.data_mut()[i] = -(1.0 - p).clamp(eps, 1.0 - eps).ln();
        u.data_mut()[n + i] = -p.clamp(eps, 1.0 - eps).ln();
    }
    Ok(u)
}

/// Per-pixel features: lattice position and one intensity channel.
#[derive(Clone, Debug)]
pub struct CrfFeatures<'a> {
    pub h: usize,
    pub w: usize,
    pub intensity: &'a [f64],
}

impl<'a> CrfFeatures<'a> {
    pub fn from_image(image: &'a Tensor) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        if c != 1 {
            return Err(Error::Shape(format!("CRF image must have one channel, got {c}")));
        }
        Ok(Self {
            h,
            w,
            intensity: image.data(),
        })
    }
}

/// A Gaussian pairwise kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Smoothness { theta_gamma: f64 },
    Appearance { theta_alpha: f64, theta_beta: f64 },
}

impl Kernel {
    #[inline]
    fn eval(&self, d2: f64, di: f64) -> f64 {
        match *self {
            Kernel::Smoothness { theta_gamma } => (-d2 / (2.0 * theta_gamma * theta_gamma)).exp(),
            Kernel::Appearance { theta_alpha, theta_beta } => {
                (-d2 / (2.0 * theta_alpha * theta_alpha) - di * di / (2.0 * theta_beta * theta_beta)).exp()
            }
        }
    }
}

fn check_field(q: &Tensor, f: &CrfFeatures) -> Result<usize> {
    let (l, h, w) = q.dims3()?;
    if (h, w) != (f.h, f.w) || f.intensity.len() != h * w {
        return Err(Error::Shape(format!(
            "label field {h}x{w} does not match feature grid {}x{}",
            f.h, f.w
        )));
    }
    Ok(l)
}

/// Exact message `sum_{j != i} k(f_i, f_j) Q_j(l)` for every pixel and label.
pub fn pairwise_filter_bruteforce(q: &Tensor, f: &CrfFeatures, kernel: Kernel) -> Result<Tensor> {
    let l = check_field(q, f)?;
    let n = f.h * f.w;
    if n > BRUTE_FORCE_MAX_PIXELS {
        return Err(Error::InvalidArgument(format!(
            "exact pairwise filter limited to {BRUTE_FORCE_MAX_PIXELS} pixels, got {n}"
        )));
    }
    let mut out = Tensor::zeros(q.shape());
    for i in 0..n {
        let (yi, xi) = ((i / f.w) as f64, (i % f.w) as f64);
        for j in 0..n {
            if j == i {
                continue;
            }
            let (yj, xj) = ((j / f.w) as f64, (j % f.w) as f64);
            let d2 = (yi - yj).powi(2) + (xi - xj).powi(2);
            let k = kernel.eval(d2, f.intensity[i] - f.intensity[j]);
            for c in 0..l {
                out.data_mut()[c * n + i] += k * q.data()[c * n + j];
            }
        }
    }
    Ok(out)
}

fn gaussian_taps(theta: f64, len: usize) -> Vec<f64> {
    (0..len).map(|d| (-((d * d) as f64) / (2.0 * theta * theta)).exp()).collect()
}

/// Fast approximation of [`pairwise_filter_bruteforce`].
///
/// The smoothness kernel is separable and is evaluated exactly with two 1-D
/// passes. The appearance kernel is evaluated over a square window of radius
/// `ceil(4 theta_alpha)`; pairs outside it carry spatial weight below
/// `exp(-8)`.
pub fn pairwise_filter_fast(q: &Tensor, f: &CrfFeatures, kernel: Kernel) -> Result<Tensor> {
    let l = check_field(q, f)?;
    let (h, w) = (f.h, f.w);
    let n = h * w;
    let mut out = Tensor::zeros(q.shape());
    match kernel {
        Kernel::Smoothness { theta_gamma } => {
            let gy = gaussian_taps(theta_gamma, h);
            let gx = gaussian_taps(theta_gamma, w);
            let mut tmp = vec![0.0; n];
            for c in 0..l {
                let src = q.channel(c);
                for y in 0..h {
                    for x in 0..w {
                        tmp[y * w + x] = (0..w).map(|xj| gx[x.abs_diff(xj)] * src[y * w + xj]).sum();
                    }
                }
                let dst = &mut out.data_mut()[c * n..(c + 1) * n];
                for y in 0..h {
                    for x in 0..w {
                        let s: f64 = (0..h).map(|yj| gy[y.abs_diff(yj)] * tmp[yj * w + x]).sum();
                        dst[y * w + x] = s - src[y * w + x];
                    }
                }
            }
        }
        Kernel::Appearance { theta_alpha, .. } => {
            let r = (4.0 * theta_alpha).ceil() as usize;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    for yj in y.saturating_sub(r)..(y + r + 1).min(h) {
                        for xj in x.saturating_sub(r)..(x + r + 1).min(w) {
                            let j = yj * w + xj;
                            if j == i {
                                continue;
                            }
                            let d2 = ((y.abs_diff(yj)).pow(2) + (x.abs_diff(xj)).pow(2)) as f64;
                            let k = kernel.eval(d2, f.intensity[i] - f.intensity[j]);
                            for c in 0..l {
                                out.data_mut()[c * n + i] += k * q.data()[c * n + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Dense `n x n` matrix of `w_app k_app + w_smooth k_smooth` with a zero
/// diagonal, reused across mean-field iterations.
fn combined_kernel(f: &CrfFeatures, p: &CrfParams) -> Result<Vec<f64>> {
    let n = f.h * f.w;
    if n > BRUTE_FORCE_MAX_PIXELS {
        return Err(Error::InvalidArgument(format!(
            "dense CRF limited to {BRUTE_FORCE_MAX_PIXELS} pixels per patch, got {n}"
        )));
    }
    let app = Kernel::Appearance {
        theta_alpha: p.theta_alpha,
        theta_beta: p.theta_beta,
    };
    let smooth = Kernel::Smoothness {
        theta_gamma: p.theta_gamma,
    };
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        let (yi, xi) = ((i / f.w) as f64, (i % f.w) as f64);
        for j in (i + 1)..n {
            let (yj, xj) = ((j / f.w) as f64, (j % f.w) as f64);
            let d2 = (yi - yj).powi(2) + (xi - xj).powi(2);
            let di = f.intensity[i] - f.intensity[j];
            let mut v = 0.0;
            if p.w_app > 0.0 {
                v += p.w_app * app.eval(d2, di);
            }
            if p.w_smooth > 0.0 {
                v += p.w_smooth * smooth.eval(d2, di);
            }
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    Ok(k)
}

/// Normalized update from unary and pairwise energies: `Q(l) ∝ exp(-u(l) - pen(l))`
/// where `pen(l)` is the weighted message from the other label.
fn update(unary: &Tensor, msg: &Tensor) -> LabelField {
    let (_, h, w) = unary.dims3().expect("rank-3 unary");
    let n = h * w;
    let mut q = Tensor::zeros(&[2, h, w]);
    let (u, m) = (unary.data(), msg.data());
    for i in 0..n {
        // Potts: label 0 pays for neighbours labelled 1 and vice versa
        let e0 = -u[i] - m[n + i];
        let e1 = -u[n + i] - m[i];
        let mx = e0.max(e1);
        let (a, b) = ((e0 - mx).exp(), (e1 - mx).exp());
        q.data_mut()[i] = a / (a + b);
        q.data_mut()[n + i] = b / (a + b);
    }
    LabelField { q }
}

fn check_unary(q: &LabelField, unary: &Tensor) -> Result<()> {
    let (l, _, _) = q.q.dims3()?;
    if l != 2 || unary.shape() != q.q.shape() {
        return Err(Error::Shape(format!(
            "mean-field step needs matching two-label tensors, got {:?} and {:?}",
            q.q.shape(),
            unary.shape()
        )));
    }
    Ok(())
}

/// One synchronous mean-field update using the exact pairwise filter.
pub fn meanfield_step(q: &LabelField, unary: &Tensor, image: &Tensor, params: &CrfParams) -> Result<LabelField> {
    check_unary(q, unary)?;
    let f = CrfFeatures::from_image(image)?;
    let mut msg = Tensor::zeros(q.q.shape());
    if params.w_app > 0.0 {
        let k = Kernel::Appearance {
            theta_alpha: params.theta_alpha,
            theta_beta: params.theta_beta,
        };
        msg.axpy(&pairwise_filter_bruteforce(&q.q, &f, k)?, params.w_app);
    }
    if params.w_smooth > 0.0 {
        let k = Kernel::Smoothness {
            theta_gamma: params.theta_gamma,
        };
        msg.axpy(&pairwise_filter_bruteforce(&q.q, &f, k)?, params.w_smooth);
    }
    Ok(update(unary, &msg))
}

/// Refines a `(1, H, W)` lesion probability map against the matching image
/// patch and returns the lesion marginal after `params.iterations` updates.
pub fn run_dcrf(prob: &Tensor, image: &Tensor, params: &CrfParams) -> Result<Tensor> {
    params.validate()?;
    if prob.shape() != image.shape() {
        return Err(Error::Shape(format!(
            "probability map {:?} and image patch {:?} differ",
            prob.shape(),
            image.shape()
        )));
    }
    let unary = unary_from_prob(prob, params.eps)?;
    let mut q = LabelField::from_unary(&unary)?;
    if params.iterations == 0 || !params.has_pairwise() {
        return Ok(q.lesion());
    }
    let f = CrfFeatures::from_image(image)?;
    let k = combined_kernel(&f, params)?;
    let n = f.h * f.w;
    let mut msg = Tensor::zeros(q.q.shape());
    for _ in 0..params.iterations {
        let qd = q.q.data();
        let md = msg.data_mut();
        for i in 0..n {
            let row = &k[i * n..(i + 1) * n];
            let (mut m0, mut m1) = (0.0, 0.0);
            for (j, &kv) in row.iter().enumerate() {
                m0 += kv * qd[j];
                m1 += kv * qd[n + j];
            }
            md[i] = m0;
            md[n + i] = m1;
        }
        q = update(&unary, &msg);
    }
    Ok(q.lesion())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn flip_x(t: &Tensor) -> Tensor {
        let (c, h, w) = t.dims3().unwrap();
        Tensor::from_fn(&[c, h, w], |i| t.at3(i / (h * w), i / w % h, w - 1 - i % w))
    }

    #[test]
    fn two_pixel_golden() {
        // values from an independent scalar evaluation of the same updates
        let p = Tensor::new(vec![1, 1, 2], vec![0.9, 0.2]).unwrap();
        let img = Tensor::new(vec![1, 1, 2], vec![0.0, 0.1]).unwrap();
        for (iterations, want) in [
            (1, [0.7589181549983725, 0.50358205513084]),
            (3, [0.8563365685141284, 0.504565226250317]),
        ] {
            let params = CrfParams {
                iterations,
                ..CrfParams::default()
            };
            let out = run_dcrf(&p, &img, &params).unwrap();
            for (a, b) in out.data().iter().zip(want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn removes_salt_noise() {
        let img = Tensor::full(&[1, 9, 9], 0.2);
        let mut p = Tensor::full(&[1, 9, 9], 0.9);
        *p.at3_mut(0, 4, 4) = 0.3;
        let out = run_dcrf(&p, &img, &CrfParams::default()).unwrap();
        assert!(out.data().iter().all(|&v| v > 0.5));
    }

    #[test]
    fn keeps_intensity_edges() {
        // weakly separated labels that line up with a sharp image edge
        let img = Tensor::from_fn(&[1, 10, 10], |i| if i % 10 < 5 { -1.0 } else { 1.0 });
        let p = Tensor::from_fn(&[1, 10, 10], |i| if i % 10 < 5 { 0.4 } else { 0.65 });
        let params = CrfParams {
            w_smooth: 0.0,
            w_app: 3.0,
            ..CrfParams::default()
        };
        let out = run_dcrf(&p, &img, &params).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(out.at3(0, y, x) > 0.5, x >= 5, "pixel {y},{x}");
            }
        }
        assert!(out.at3(0, 5, 2) < 0.4 && out.at3(0, 5, 7) > 0.65);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn meanfield_step_commutes_with_flips(seed in 0u64..1000, h in 1usize..7, w in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Tensor::random_uniform(&[1, h, w], 0.0, 1.0, &mut rng);
            let img = Tensor::random_uniform(&[1, h, w], -1.0, 1.0, &mut rng);
            let params = CrfParams { w_app: 1.3, w_smooth: 0.7, ..CrfParams::default() };
            let u = unary_from_prob(&p, params.eps).unwrap();
            let q = LabelField::from_unary(&u).unwrap();
            let direct = flip_x(&meanfield_step(&q, &u, &img, &params).unwrap().q);
            let fq = LabelField { q: flip_x(&q.q) };
            let flipped = meanfield_step(&fq, &flip_x(&u), &flip_x(&img), &params).unwrap().q;
            prop_assert!(direct.max_abs_diff(&flipped) <= 1e-12);
        }
    }

    #[test]
    fn unary_values() {
        let p = Tensor::new(vec![1, 1, 2], vec![0.5, 1.0]).unwrap();
        let u = unary_from_prob(&p, 1e-8).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((u.data()[0] - ln2).abs() < 1e-15);
        assert!((u.data()[2] - ln2).abs() < 1e-15);
        assert!((u.data()[3] - 1e-8).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::random_uniform(&[1, 4, 4], 0.0, 1.0, &mut rng);
        let q = LabelField::from_unary(&unary_from_prob(&p, 1e-8).unwrap()).unwrap();
        for (a, b) in q.lesion().data().iter().zip(p.data()) {
            assert!((a - b.clamp(1e-8, 1.0 - 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn no_pairwise_returns_unary_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::random_uniform(&[1, 5, 6], 0.0, 1.0, &mut rng);
        let img = Tensor::random_uniform(&[1, 5, 6], -1.0, 1.0, &mut rng);
        let u = unary_from_prob(&p, 1e-8).unwrap();
        let q = LabelField::from_unary(&u).unwrap();
        let step = meanfield_step(&q, &u, &img, &CrfParams::disabled()).unwrap();
        assert!(step.q.max_abs_diff(&q.q) < 1e-12);
        let out = run_dcrf(&p, &img, &CrfParams::disabled()).unwrap();
        assert!(out.max_abs_diff(&p) < 1e-12);
        let zero_iter = CrfParams {
            iterations: 0,
            ..CrfParams::default()
        };
        assert!(run_dcrf(&p, &img, &zero_iter).unwrap().max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn single_pixel_and_pair_messages() {
        let q = Tensor::full(&[2, 1, 1], 0.5);
        let img = [0.0];
        let f = CrfFeatures {
            h: 1,
            w: 1,
            intensity: &img,
        };
        let k = Kernel::Smoothness { theta_gamma: 2.0 };
        assert_eq!(pairwise_filter_bruteforce(&q, &f, k).unwrap().data(), &[0.0, 0.0]);

        let q = Tensor::new(vec![1, 1, 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let img = [0.0; 4];
        let f = CrfFeatures {
            h: 1,
            w: 4,
            intensity: &img,
        };
        let m = pairwise_filter_bruteforce(&q, &f, Kernel::Smoothness { theta_gamma: 1.7 }).unwrap();
        let d: f64 = 3.0;
        assert!((m.data()[0] - (-d * d / (2.0 * 1.7 * 1.7)).exp()).abs() < 1e-15);
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let img = Tensor::full(&[1, 6, 6], 0.3);
        let mut q = Tensor::zeros(&[2, 6, 6]);
        for i in 0..36 {
            q.data_mut()[i] = 0.5;
            q.data_mut()[36 + i] = 0.5;
        }
        let field = LabelField { q };
        let u = Tensor::full(&[2, 6, 6], 0.7);
        let out = meanfield_step(&field, &u, &img, &CrfParams::default()).unwrap();
        assert!(out.q.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn fast_filter_tracks_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::random_uniform(&[1, 32, 32], -1.0, 1.0, &mut rng);
        let mut q = Tensor::random_uniform(&[2, 32, 32], 0.0, 1.0, &mut rng);
        for i in 0..1024 {
            let s = q.data()[i] + q.data()[1024 + i];
            q.data_mut()[i] /= s;
            q.data_mut()[1024 + i] /= s;
        }
        let f = CrfFeatures::from_image(&img).unwrap();
        for k in [
            Kernel::Smoothness { theta_gamma: 2.5 },
            Kernel::Appearance {
                theta_alpha: 3.0,
                theta_beta: 0.5,
            },
        ] {
            let a = pairwise_filter_bruteforce(&q, &f, k).unwrap();
            let b = pairwise_filter_fast(&q, &f, k).unwrap();
            let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
            let den: f64 = a.data().iter().map(|x| x * x).sum();
            assert!((num / den).sqrt() < 0.02);
        }
    }

    #[test]
    fn brute_force_size_guard() {
        let q = Tensor::zeros(&[2, 65, 64]);
        let img = vec![0.0; 65 * 64];
        let f = CrfFeatures {
            h: 65,
            w: 64,
            intensity: &img,
        };
        assert!(pairwise_filter_bruteforce(&q, &f, Kernel::Smoothness { theta_gamma: 1.0 }).is_err());
    }

    #[test]
    fn run_dcrf_matches_repeated_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = Tensor::random_uniform(&[1, 7, 8], 0.0, 1.0, &mut rng);
        let img = Tensor::random_uniform(&[1, 7, 8], -1.0, 1.0, &mut rng);
        let params = CrfParams {
            w_app: 2.0,
            w_smooth: 1.5,
            iterations: 4,
            ..CrfParams::default()
        };
        let u = unary_from_prob(&p, params.eps).unwrap();
        let mut q = LabelField::from_unary(&u).unwrap();
        for _ in 0..4 {
            q = meanfield_step(&q, &u, &img, &params).unwrap();
            assert!(q.normalization_error() < 1e-9);
        }
        let fast = run_dcrf(&p, &img, &params).unwrap();
        assert!(fast.max_abs_diff(&q.lesion()) < 1e-12);
    }
}
