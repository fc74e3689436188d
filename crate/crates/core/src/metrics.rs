//! Pixel-level evaluation: confusion counts, Dice, sensitivity, specificity,
//! Hausdorff distance, per-slice summary statistics and subject-level splits.
//!
//! Conventions for degenerate slices:
//! * Dice is 1 when prediction and ground truth are both empty.
//! * Sensitivity is undefined when the ground truth is empty, specificity
//!   when there is no background.
//! * Hausdorff distance is 0 for two empty sets and undefined when exactly
//!   one is empty; undefined values are left out of averages.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary `H x W` mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                bits.push(f(y, x));
            }
        }
        Self { h, w, bits }
    }

    /// Pixels with value `>= threshold` become foreground.
    pub fn from_tensor(t: &Tensor, threshold: f64) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 1 {
            return Err(Error::Shape(format!("mask tensor must have one channel, got {c}")));
        }
        Ok(Self {
            h,
            w,
            bits: t.data().iter().map(|&v| v >= threshold).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.h, self.w], self.bits.iter().map(|&b| f64::from(u8::from(b))).collect())
            .expect("mask dims are positive")
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixel coordinates `(row, col)`.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ((i / self.w) as f64, (i % self.w) as f64))
            .collect()
    }

    pub fn flip_x(&self) -> Self {
        Self::from_fn(self.h, self.w, |y, x| self.get(y, self.w - 1 - x))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

fn check_same(a: &Mask, b: &Mask) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::Shape(format!("masks differ in size: {}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    check_same(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2 tp / (2 tp + fp + fn)`; 1 when both masks are empty.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// `tp / (tp + fn)`; `None` when the ground truth is empty.
pub fn sensitivity(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tp + c.fn_;
    (den > 0).then(|| c.tp as f64 / den as f64)
}

/// `tn / (tn + fp)`; `None` when there is no background.
pub fn specificity(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tn + c.fp;
    (den > 0).then(|| c.tn as f64 / den as f64)
}

/// Directed distance `max_a min_b |a - b|^2`, with early exit once a point
/// of `b` falls below the running maximum.
fn directed_sq(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut cmax = 0.0f64;
    for &(ay, ax) in a {
        let mut cmin = f64::INFINITY;
        for &(by, bx) in b {
            let d = (ay - by) * (ay - by) + (ax - bx) * (ax - bx);
            if d < cmin {
                cmin = d;
                if cmin < cmax {
                    break;
                }
            }
        }
        if cmin > cmax {
            cmax = cmin;
        }
    }
    cmax
}

/// Symmetric Hausdorff distance between two point sets. Two empty sets give
/// 0; exactly one empty set gives `None`.
pub fn hausdorff(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Some(0.0),
        (true, false) | (false, true) => None,
        _ => Some(directed_sq(a, b).max(directed_sq(b, a)).sqrt()),
    }
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            if f[p].is_infinite() {
                // replace an infinite seed outright
                v[k] = q;
                z[k + 1] = f64::INFINITY;
                break;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64;
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                v[k] = q;
                z[k + 1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            let d = q as f64 - p as f64;
            d * d + f[p]
        };
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// foreground pixel of `m`.
pub fn squared_distance_transform(m: &Mask) -> Vec<f64> {
    let (h, w) = (m.h, m.w);
    let mut grid: Vec<f64> = m.bits.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Hausdorff distance between the foreground pixels of two masks, computed
/// through distance transforms.
pub fn hausdorff_masks(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    check_same(pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let dt_gt = squared_distance_transform(gt);
    let dt_pred = squared_distance_transform(pred);
    let directed = |src: &Mask, dt: &[f64]| {
        src.bits
            .iter()
            .zip(dt)
            .filter(|(&b, _)| b)
            .map(|(_, &d)| d)
            .fold(0.0f64, f64::max)
    };
    Ok(Some(directed(pred, &dt_gt).max(directed(gt, &dt_pred)).sqrt()))
}

/// Metrics of one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub subject_id: String,
    pub slice_index: usize,
    pub dsc: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub hd: Option<f64>,
    pub counts: ConfusionCounts,
}

pub fn slice_metrics(subject_id: &str, slice_index: usize, pred: &Mask, gt: &Mask) -> Result<SliceMetrics> {
    let counts = confusion(pred, gt)?;
    Ok(SliceMetrics {
        subject_id: subject_id.to_string(),
        slice_index,
        dsc: dsc(&counts),
        sensitivity: sensitivity(&counts),
        specificity: specificity(&counts),
        hd: hausdorff_masks(pred, gt)?,
        counts,
    })
}

/// Five-number style summary of one metric across slices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Tukey hinges: quartiles are medians of the lower and upper halves, the
/// overall median excluded when the count is odd.
pub fn distribution(values: &[f64]) -> Option<Distribution> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = median_sorted(&v);
    let (q1, q3) = if n == 1 {
        (v[0], v[0])
    } else {
        (median_sorted(&v[..n / 2]), median_sorted(&v[(n + 1) / 2..]))
    };
    Some(Distribution {
        n,
        mean: v.iter().sum::<f64>() / n as f64,
        median,
        q1,
        q3,
        iqr: q3 - q1,
        min: v[0],
        max: v[n - 1],
    })
}

/// Per-metric distributions over slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub dsc: Option<Distribution>,
    pub sensitivity: Option<Distribution>,
    pub specificity: Option<Distribution>,
    pub hd: Option<Distribution>,
}

pub fn per_slice_stats(slices: &[SliceMetrics]) -> Result<SliceStats> {
    if slices.is_empty() {
        return Err(Error::InvalidArgument("per-slice statistics need at least one slice".into()));
    }
    let col = |f: &dyn Fn(&SliceMetrics) -> Option<f64>| -> Vec<f64> { slices.iter().filter_map(f).collect() };
    Ok(SliceStats {
        dsc: distribution(&col(&|s| Some(s.dsc))),
        sensitivity: distribution(&col(&|s| s.sensitivity)),
        specificity: distribution(&col(&|s| s.specificity)),
        hd: distribution(&col(&|s| s.hd)),
    })
}

/// CSV rendering of [`SliceStats`], one row per metric.
pub fn stats_csv(stats: &SliceStats) -> String {
    let mut s = String::from("# quartiles: Tukey hinges (median excluded from halves)\nmetric,n,mean,median,q1,q3,iqr,min,max\n");
    for (name, d) in [
        ("dsc", &stats.dsc),
        ("sensitivity", &stats.sensitivity),
        ("specificity", &stats.specificity),
        ("hd", &stats.hd),
    ] {
        match d {
            Some(d) => writeln!(
                s,
                "{name},{},{},{},{},{},{},{},{}",
                d.n, d.mean, d.median, d.q1, d.q3, d.iqr, d.min, d.max
            )
            .unwrap(),
            None => writeln!(s, "{name},0,,,,,,,").unwrap(),
        }
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `subject,slice,dsc,sensitivity,specificity,hd`; undefined values are empty.
pub fn metrics_csv(slices: &[SliceMetrics]) -> String {
    let mut s = String::from("subject,slice,dsc,sensitivity,specificity,hd\n");
    for m in slices {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            m.subject_id,
            m.slice_index,
            m.dsc,
            opt(m.sensitivity),
            opt(m.specificity),
            opt(m.hd)
        )
        .unwrap();
    }
    s
}

/// Dataset-level aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub slices: usize,
    pub counts: ConfusionCounts,
    /// From pooled confusion counts.
    pub micro_dsc: f64,
    pub micro_sensitivity: Option<f64>,
    pub micro_specificity: Option<f64>,
    /// Means of per-slice values where defined.
    pub mean_dsc: f64,
    pub mean_sensitivity: Option<f64>,
    pub mean_specificity: Option<f64>,
    pub mean_hd: Option<f64>,
    /// Slices whose HD is undefined (exactly one empty mask).
    pub hd_undefined: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate(slices: &[SliceMetrics]) -> Aggregate {
    let counts: ConfusionCounts = slices.iter().map(|s| s.counts).sum();
    Aggregate {
        slices: slices.len(),
        counts,
        micro_dsc: dsc(&counts),
        micro_sensitivity: sensitivity(&counts),
        micro_specificity: specificity(&counts),
        mean_dsc: mean(slices.iter().map(|s| s.dsc)).unwrap_or(f64::NAN),
        mean_sensitivity: mean(slices.iter().filter_map(|s| s.sensitivity)),
        mean_specificity: mean(slices.iter().filter_map(|s| s.specificity)),
        mean_hd: mean(slices.iter().filter_map(|s| s.hd)),
        hd_undefined: slices.iter().filter(|s| s.hd.is_none()).count(),
    }
}

/// Subject-level train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn shuffled(subjects: &[String], seed: u64) -> Vec<String> {
    let mut s = subjects.to_vec();
    s.sort();
    s.dedup();
    s.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    s
}

/// Splits subjects by `(train, val, test)` ratios. Validation and test sizes
/// are the rounded ratios (at least one subject each); the remainder trains.
pub fn split_dataset(subjects: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let s = shuffled(subjects, seed);
    let n = s.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 subjects to split, got {n}")));
    }
    let (_, rv, rt) = ratios;
    let nv = ((n as f64 * rv + 0.5).floor() as usize).max(1);
    let nt = ((n as f64 * rt + 0.5).floor() as usize).max(1);
    if nv + nt >= n {
        return Err(Error::InvalidArgument(format!(
            "ratios {ratios:?} leave no training subjects out of {n}"
        )));
    }
    Ok(Split {
        val: s[..nv].to_vec(),
        test: s[nv..nv + nt].to_vec(),
        train: s[nv + nt..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_val: Vec<String>,
    pub test: Vec<String>,
}

/// Five subject-level folds; test folds are disjoint, cover every subject
/// and differ in size by at most one.
pub fn five_fold(subjects: &[String], seed: u64) -> Result<Vec<Fold>> {
    let s = shuffled(subjects, seed);
    let n = s.len();
    if n < 5 {
        return Err(Error::InvalidArgument(format!("five-fold cross-validation needs >= 5 subjects, got {n}")));
    }
    let mut folds = Vec::with_capacity(5);
    let mut start = 0;
    for i in 0..5 {
        let size = n / 5 + usize::from(i < n % 5);
        let test = s[start..start + size].to_vec();
        let train_val = s[..start].iter().chain(&s[start + size..]).cloned().collect();
        folds.push(Fold { train_val, test });
        start += size;
    }
    Ok(folds)
}
