//! Gaussian-process Bayesian optimization with Expected Improvement.
//!
//! The objective is minimized. Parameters live in `[0,1]^d` internally;
//! [`SearchSpace`] maps them to and from user units (log dimensions are
//! mapped through `ln` first).

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::crf::CrfParams;
use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("search space has no dimensions".into()));
        }
        for d in &dims {
            let bad = !(d.lower < d.upper) || !d.lower.is_finite() || !d.upper.is_finite();
            if bad || (d.scale == Scale::Log && d.lower <= 0.0) {
                return Err(Error::Config(format!("invalid bounds for `{}`: [{}, {}]", d.name, d.lower, d.upper)));
            }
        }
        Ok(Self { dims })
    }

    /// The continuous dense-CRF parameters, all log-scaled.
    pub fn crf() -> Self {
        let d = |name: &str, lower, upper| Dim {
            name: name.into(),
            lower,
            upper,
            scale: Scale::Log,
        };
        Self::new(vec![
            d("w_app", 0.1, 20.0),
            d("w_smooth", 0.1, 20.0),
            d("theta_alpha", 0.5, 64.0),
            d("theta_beta", 0.05, 2.0),
            d("theta_gamma", 0.5, 8.0),
        ])
        .expect("static bounds are valid")
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(u)
            .map(|(d, &t)| {
                let t = t.clamp(0.0, 1.0);
                match d.scale {
                    Scale::Linear => d.lower + t * (d.upper - d.lower),
                    Scale::Log => (d.lower.ln() + t * (d.upper.ln() - d.lower.ln())).exp(),
                }
            })
            .collect()
    }

    pub fn to_unit(&self, v: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(v)
            .map(|(d, &x)| {
                let t = match d.scale {
                    Scale::Linear => (x - d.lower) / (d.upper - d.lower),
                    Scale::Log => (x.ln() - d.lower.ln()) / (d.upper.ln() - d.lower.ln()),
                };
                t.clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// Applies a point of [`SearchSpace::crf`] to a base parameter set.
pub fn crf_params_from(base: &CrfParams, v: &[f64]) -> CrfParams {
    CrfParams {
        w_app: v[0],
        w_smooth: v[1],
        theta_alpha: v[2],
        theta_beta: v[3],
        theta_gamma: v[4],
        ..base.clone()
    }
}

/// Matérn 5/2 kernel hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl KernelParams {
    pub fn isotropic(d: usize, lengthscale: f64, signal_var: f64, noise_var: f64) -> Self {
        Self {
            lengthscales: vec![lengthscale; d],
            signal_var,
            noise_var,
        }
    }

    pub fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        let s = (5.0 * r2).sqrt();
        self.signal_var * (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
    }
}

/// Lower-triangular Cholesky factor of a dense symmetric matrix, or `None`
/// when it is not numerically positive definite.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L z = b` in place.
fn forward_sub(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `L^T z = b` in place.
fn backward_sub(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Fitted GP posterior with a constant prior mean.
#[derive(Clone, Debug)]
pub struct GpModel {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    pub kernel: KernelParams,
    pub prior_mean: f64,
    /// Extra diagonal added to make the covariance factorizable.
    pub jitter: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

fn check_inputs(x: &[Vec<f64>], y: &[f64], kernel: &KernelParams) -> Result<()> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "GP needs matching non-empty inputs, got {} points and {} values",
            x.len(),
            y.len()
        )));
    }
    let d = kernel.lengthscales.len();
    for p in x {
        if p.len() != d || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("GP input {p:?} outside [0,1]^{d}")));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("GP targets must be finite".into()));
    }
    Ok(())
}

/// Fits the posterior with prior mean 0.
pub fn gp_fit(x: &[Vec<f64>], y: &[f64], kernel: &KernelParams) -> Result<GpModel> {
    gp_fit_with_mean(x, y, kernel, 0.0)
}

pub fn gp_fit_with_mean(x: &[Vec<f64>], y: &[f64], kernel: &KernelParams, prior_mean: f64) -> Result<GpModel> {
    check_inputs(x, y, kernel)?;
    let n = x.len();
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.k(&x[i], &x[j]);
            cov[i * n + j] = v;
            cov[j * n + i] = v;
        }
        cov[i * n + i] += kernel.noise_var;
    }
    let mut jitter = 0.0;
    let chol = loop {
        let mut a = cov.clone();
        for i in 0..n {
            a[i * n + i] += jitter;
        }
        if let Some(l) = cholesky(&a, n) {
            break l;
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        if jitter > JITTER_MAX * 1.000001 {
            return Err(Error::Singular { jitter: JITTER_MAX });
        }
    };
    let mut alpha: Vec<f64> = y.iter().map(|v| v - prior_mean).collect();
    forward_sub(&chol, n, &mut alpha);
    backward_sub(&chol, n, &mut alpha);
    Ok(GpModel {
        x: x.to_vec(),
        y: y.to_vec(),
        kernel: kernel.clone(),
        prior_mean,
        jitter,
        chol,
        alpha,
    })
}

impl GpModel {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `-1/2 r^T K^-1 r - sum ln L_ii - n/2 ln 2 pi`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len();
        let fit: f64 = self
            .y
            .iter()
            .zip(&self.alpha)
            .map(|(y, a)| (y - self.prior_mean) * a)
            .sum();
        let logdet: f64 = (0..n).map(|i| self.chol[i * n + i].ln()).sum();
        -0.5 * fit - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Posterior mean and variance (clamped at 0) of the latent function.
pub fn gp_predict(model: &GpModel, x: &[f64]) -> (f64, f64) {
    let n = model.len();
    let kx: Vec<f64> = model.x.iter().map(|p| model.kernel.k(p, x)).collect();
    let mean = model.prior_mean + kx.iter().zip(&model.alpha).map(|(a, b)| a * b).sum::<f64>();
    let mut v = kx;
    forward_sub(&model.chol, n, &mut v);
    let var = model.kernel.signal_var - v.iter().map(|t| t * t).sum::<f64>();
    (mean, var.max(0.0))
}

/// Expected improvement below `best` (minimization).
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    let gap = best - mean;
    if sigma <= 0.0 {
        return gap.max(0.0);
    }
    let z = gap / sigma;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    (gap * std.cdf(z) + sigma * std.pdf(z)).max(0.0)
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Halton sequence with a random digit permutation per base.
#[derive(Clone, Debug)]
pub struct ScrambledHalton {
    perms: Vec<Vec<u64>>,
    index: u64,
}

impl ScrambledHalton {
    pub fn new(d: usize, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 || d > PRIMES.len() {
            return Err(Error::InvalidArgument(format!("Halton dimension {d} unsupported")));
        }
        let perms = PRIMES[..d]
            .iter()
            .map(|&b| {
                let mut p: Vec<u64> = (0..b).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        Ok(Self { perms, index: 1 })
    }

    fn radical(index: u64, base: u64, perm: &[u64]) -> f64 {
        let inv = 1.0 / base as f64;
        let mut f = inv;
        let mut i = index;
        let mut out = 0.0;
        // fixed digit count so that permuted leading zeros stay bounded
        while f > 1e-15 {
            out += perm[(i % base) as usize] as f64 * f;
            i /= base;
            f *= inv;
        }
        out.min(1.0 - f64::EPSILON)
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let p = self
            .perms
            .iter()
            .zip(PRIMES)
            .map(|(perm, b)| Self::radical(self.index, b, perm))
            .collect();
        self.index += 1;
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub budget: usize,
    pub init_points: usize,
    pub candidates: usize,
    pub refine_top: usize,
    /// Added to the worst observed value when the objective is non-finite.
    pub penalty: f64,
    /// Restarts of the marginal-likelihood search.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: 50,
            init_points: 5,
            candidates: 1000,
            refine_top: 5,
            penalty: 1.0,
            restarts: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub params: Vec<f64>,
    /// Value returned by the objective, possibly non-finite.
    pub raw: f64,
    /// Value used by the optimizer.
    pub objective: f64,
    pub incumbent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoResult {
    pub best_params: Vec<f64>,
    pub best_value: f64,
    pub trace: Vec<TraceRow>,
}

/// `iteration,<param names...>,objective,incumbent`.
pub fn trace_csv(space: &SearchSpace, trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration");
    for d in space.dims() {
        write!(s, ",{}", d.name).unwrap();
    }
    s.push_str(",objective,incumbent\n");
    for r in trace {
        write!(s, "{}", r.iteration).unwrap();
        for p in &r.params {
            write!(s, ",{p}").unwrap();
        }
        writeln!(s, ",{},{}", r.objective, r.incumbent).unwrap();
    }
    s
}

/// Log-space bounds of (lengthscale, signal variance, noise variance).
const LS_BOUNDS: (f64, f64) = (0.01, 10.0);
const SF_BOUNDS: (f64, f64) = (0.01, 100.0);
const SN_BOUNDS: (f64, f64) = (1e-8, 1.0);

fn theta_to_kernel(theta: &[f64], d: usize) -> KernelParams {
    KernelParams {
        lengthscales: theta[..d].iter().map(|v| v.exp()).collect(),
        signal_var: theta[d].exp(),
        noise_var: theta[d + 1].exp(),
    }
}

fn theta_bounds(d: usize) -> Vec<(f64, f64)> {
    let ln = |(a, b): (f64, f64)| (f64::ln(a), f64::ln(b));
    let mut v = vec![ln(LS_BOUNDS); d];
    v.push(ln(SF_BOUNDS));
    v.push(ln(SN_BOUNDS));
    v
}

fn neg_lml(x: &[Vec<f64>], y: &[f64], theta: &[f64], d: usize) -> f64 {
    match gp_fit(x, y, &theta_to_kernel(theta, d)) {
        Ok(m) => -m.log_marginal_likelihood(),
        Err(_) => f64::INFINITY,
    }
}

/// Derivative-free compass search in log-hyperparameter space.
fn compass(f: &dyn Fn(&[f64]) -> f64, start: Vec<f64>, bounds: &[(f64, f64)]) -> (Vec<f64>, f64) {
    let mut x = start;
    let mut fx = f(&x);
    let mut step = 1.0;
    let mut evals = 0;
    while step > 1e-3 && evals < 400 {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut t = x.clone();
                t[i] = (t[i] + dir * step).clamp(bounds[i].0, bounds[i].1);
                if t[i] == x[i] {
                    continue;
                }
                let ft = f(&t);
                evals += 1;
                if ft < fx {
                    x = t;
                    fx = ft;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// Kernel hyperparameters maximizing the marginal likelihood over a
/// default start plus `restarts` random starts. Targets are expected to be
/// standardized.
pub fn fit_hyperparams(x: &[Vec<f64>], y: &[f64], restarts: usize, rng: &mut impl Rng) -> KernelParams {
    let d = x[0].len();
    let bounds = theta_bounds(d);
    let f = |t: &[f64]| neg_lml(x, y, t, d);
    let mut starts = vec![{
        let mut t = vec![0.3f64.ln(); d];
        t.push(0.0);
        t.push(1e-4f64.ln());
        t
    }];
    for _ in 0..restarts {
        starts.push(bounds.iter().map(|&(a, b)| rng.gen_range(a..b)).collect());
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in starts {
        let (t, v) = compass(&f, s, &bounds);
        if best.as_ref().map_or(true, |(_, bv)| v < *bv) {
            best = Some((t, v));
        }
    }
    theta_to_kernel(&best.expect("at least one start").0, d)
}

fn ei_at(model: &GpModel, best: f64, u: &[f64]) -> f64 {
    let (m, v) = gp_predict(model, u);
    expected_improvement(m, v, best)
}

/// Maximizes EI by random candidates then coordinate refinement of the best few.
fn maximize_ei(model: &GpModel, best: f64, d: usize, cfg: &BoConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut cands: Vec<(Vec<f64>, f64)> = (0..cfg.candidates.max(1))
        .map(|_| {
            let u: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
            let e = ei_at(model, best, &u);
            (u, e)
        })
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1));
    cands.truncate(cfg.refine_top.max(1));
    let mut winner = cands[0].clone();
    for (mut u, mut e) in cands {
        let mut step = 0.05;
        while step >= 1e-3 {
            let mut moved = false;
            for i in 0..d {
                for dir in [1.0, -1.0] {
                    let mut t = u.clone();
                    t[i] = (t[i] + dir * step).clamp(0.0, 1.0);
                    let et = ei_at(model, best, &t);
                    if et > e {
                        u = t;
                        e = et;
                        moved = true;
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        if e > winner.1 {
            winner = (u, e);
        }
    }
    winner.0
}

/// Minimizes `objective` over `space`.
///
/// The first `init_points` evaluations follow a scrambled Halton sequence;
/// each later one maximizes EI under a GP refit to all observations.
pub fn bo_loop(
    mut objective: impl FnMut(&[f64]) -> f64,
    space: &SearchSpace,
    cfg: &BoConfig,
) -> Result<BoResult> {
    if cfg.init_points == 0 || cfg.budget < cfg.init_points {
        return Err(Error::Config(format!(
            "budget {} must be >= init_points {} >= 1",
            cfg.budget, cfg.init_points
        )));
    }
    let d = space.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut halton = ScrambledHalton::new(d, &mut rng)?;
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(cfg.budget);
    let mut ys: Vec<f64> = Vec::with_capacity(cfg.budget);
    let mut trace = Vec::with_capacity(cfg.budget);
    let mut incumbent = f64::INFINITY;
    let mut best_u: Vec<f64> = Vec::new();

    for it in 0..cfg.budget {
        let u = if it < cfg.init_points {
            halton.next_point()
        } else {
            let mu = ys.iter().sum::<f64>() / ys.len() as f64;
            let sd = (ys.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            let z: Vec<f64> = ys.iter().map(|v| (v - mu) / sd).collect();
            let kernel = fit_hyperparams(&xs, &z, cfg.restarts, &mut rng);
            let model = gp_fit(&xs, &z, &kernel)?;
            let zbest = (incumbent - mu) / sd;
            maximize_ei(&model, zbest, d, cfg, &mut rng)
        };
        let params = space.from_unit(&u);
        let raw = objective(&params);
        let value = if raw.is_finite() {
            raw
        } else {
            ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0) + cfg.penalty
        };
        if value < incumbent {
            incumbent = value;
            best_u = u.clone();
        }
        xs.push(u);
        ys.push(value);
        trace.push(TraceRow {
            iteration: it + 1,
            params,
            raw,
            objective: value,
            incumbent,
        });
    }
    Ok(BoResult {
        best_params: space.from_unit(&best_u),
        best_value: incumbent,
        trace,
    })
}
