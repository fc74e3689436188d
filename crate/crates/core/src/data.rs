//! Slice datasets on disk, preprocessing, mask restoration, overlays and the
//! synthetic punctate-lesion generator.
//!
//! Images are binary 16-bit PGM (`P5`, maxval 65535, big-endian samples),
//! masks 8-bit PGM with values {0, 255}, overlays binary PPM (`P6`). A JSON
//! manifest lists one entry per slice with paths relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ConfusionCounts, Mask};
use crate::proposal::{round_half_up, BBox};
use crate::tensor::{bilinear_taps, resize_bilinear, Tensor};

/// One slice: raw intensities and its lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub subject_id: String,
    pub slice_index: usize,
    /// `(1, H, W)` raw intensities.
    pub image: Tensor,
    pub mask: Mask,
}

impl SliceRecord {
    pub fn new(subject_id: impl Into<String>, slice_index: usize, image: Tensor, mask: Mask) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        if c != 1 || (h, w) != (mask.h, mask.w) {
            return Err(Error::Shape(format!(
                "image {:?} and mask {}x{} do not match",
                image.shape(),
                mask.h,
                mask.w
            )));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            slice_index,
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.h
    }

    pub fn width(&self) -> usize {
        self.mask.w
    }

    /// `subject/slice` label.
    pub fn label(&self) -> String {
        format!("{}/{}", self.subject_id, self.slice_index)
    }
}

// ---------------------------------------------------------------- netpbm

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::format(path, "file too short for a netpbm header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, f) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, format!("expected header field {} at byte {start}", i + 1)));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, format!("header field {} at byte {start} out of range", i + 1)))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, format!("missing whitespace after maxval at byte {pos}")));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(path, format!("zero image dimension {width}x{height}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_offset: pos + 1,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn payload<'a>(path: &Path, bytes: &'a [u8], h: &Header, bytes_per_sample: usize, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * bytes_per_sample * channels;
    let have = bytes.len() - h.data_offset.min(bytes.len());
    if have < need {
        return Err(Error::format(
            path,
            format!("truncated payload: expected {need} bytes after offset {}, found {have}", h.data_offset),
        ));
    }
    Ok(&bytes[h.data_offset..h.data_offset + need])
}

/// Reads a 16-bit grayscale PGM; returns `(height, width, samples)`.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::format(path, "not a binary PGM (expected magic P5)"));
    }
    if h.maxval != 65535 {
        return Err(Error::format(path, format!("image maxval {} where 65535 expected", h.maxval)));
    }
    let data = payload(path, &bytes, &h, 2, 1)?;
    let samples = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((h.height, h.width, samples))
}

pub fn write_pgm16(path: &Path, h: usize, w: usize, samples: &[u16]) -> Result<()> {
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(samples.len() * 2);
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    write_bytes(path, &out)
}

/// Reads an 8-bit mask PGM whose samples must be 0 or 255.
pub fn read_mask_pgm(path: &Path) -> Result<Mask> {
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::format(path, "not a binary PGM (expected magic P5)"));
    }
    if h.maxval != 255 {
        return Err(Error::format(path, format!("mask maxval {} where 255 expected", h.maxval)));
    }
    let data = payload(path, &bytes, &h, 1, 1)?;
    if let Some(i) = data.iter().position(|&b| b != 0 && b != 255) {
        return Err(Error::format(
            path,
            format!("mask value {} at row {}, column {} (allowed: 0, 255)", data[i], i / h.width, i % h.width),
        ));
    }
    Ok(Mask {
        h: h.height,
        w: h.width,
        bits: data.iter().map(|&b| b == 255).collect(),
    })
}

pub fn write_mask_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    out.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    write_bytes(path, &out)
}

/// RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.w + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.rgb);
    write_bytes(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes)?;
    if &h.magic != b"P6" || h.maxval != 255 {
        return Err(Error::format(path, "expected binary PPM (P6) with maxval 255"));
    }
    let data = payload(path, &bytes, &h, 1, 3)?;
    Ok(RgbImage {
        h: h.height,
        w: h.width,
        rgb: data.to_vec(),
    })
}

// -------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub slice_index: usize,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Parsed manifest with paths resolved against its directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("invalid manifest: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut entries {
            for p in [&mut e.image, &mut e.mask] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.exists() {
                    return Err(Error::format(
                        path,
                        format!("entry {}/{} references missing file {}", e.subject_id, e.slice_index, p.display()),
                    ));
                }
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    /// Writes entries with paths made relative to the manifest directory
    /// where possible.
    pub fn save(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel: Vec<ManifestEntry> = entries
            .iter()
            .map(|e| {
                let strip = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
                ManifestEntry {
                    image: strip(&e.image),
                    mask: strip(&e.mask),
                    ..e.clone()
                }
            })
            .collect();
        let text = serde_json::to_string_pretty(&rel).expect("manifest serializes");
        write_bytes(path, format!("{text}\n").as_bytes())
    }

    /// Distinct subject ids in first-seen order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.subject_id) {
                seen.push(e.subject_id.clone());
            }
        }
        seen
    }

    pub fn entries_for<'a>(&'a self, subjects: &'a [String]) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| subjects.contains(&e.subject_id))
    }
}

pub fn load_slice(entry: &ManifestEntry) -> Result<SliceRecord> {
    let (h, w, samples) = read_pgm16(&entry.image)?;
    let mask = read_mask_pgm(&entry.mask)?;
    if (mask.h, mask.w) != (h, w) {
        return Err(Error::format(
            &entry.mask,
            format!("mask is {}x{} but image {} is {h}x{w}", mask.h, mask.w, entry.image.display()),
        ));
    }
    let image = Tensor::new(vec![1, h, w], samples.iter().map(|&s| f64::from(s)).collect())?;
    SliceRecord::new(entry.subject_id.clone(), entry.slice_index, image, mask)
}

/// Writes image and mask; raw intensities must be integers in `0..=65535`.
pub fn save_slice(record: &SliceRecord, image_path: &Path, mask_path: &Path) -> Result<ManifestEntry> {
    let mut samples = Vec::with_capacity(record.image.len());
    for (i, &v) in record.image.data().iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=65535.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "{}: sample {v} at pixel {i} is not a 16-bit integer",
                record.label()
            )));
        }
        samples.push(v as u16);
    }
    write_pgm16(image_path, record.height(), record.width(), &samples)?;
    write_mask_pgm(mask_path, &record.mask)?;
    Ok(ManifestEntry {
        subject_id: record.subject_id.clone(),
        slice_index: record.slice_index,
        image: image_path.to_path_buf(),
        mask: mask_path.to_path_buf(),
    })
}

// ---------------------------------------------------------- preprocessing

/// Zero mean, unit population variance over the slice; constant input maps
/// to all zeros.
pub fn normalize(image: &Tensor) -> Tensor {
    let n = image.len() as f64;
    let mean = image.data().iter().sum::<f64>() / n;
    let var = image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return Tensor::zeros(image.shape());
    }
    image.map(|v| (v - mean) / sd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            d_min: 0.85,
            d_max: 1.15,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.d_min && self.d_min <= self.d_max && (0.0..=1.0).contains(&self.flip_prob) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation settings {self:?}")))
        }
    }
}

/// Random width deformation and lateral flip, drawn from `rng`.
pub fn augment(record: &SliceRecord, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<SliceRecord> {
    cfg.validate()?;
    let d = if cfg.d_min < cfg.d_max {
        rng.gen_range(cfg.d_min..cfg.d_max)
    } else {
        cfg.d_min
    };
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    augment_with(record, d, flip)
}

/// Rescales the width to `R(W d)` (bilinear image, nearest mask), optionally
/// flips left-right, then center-crops or zero-pads back to `W`.
pub fn augment_with(record: &SliceRecord, d: f64, flip: bool) -> Result<SliceRecord> {
    let (h, w) = (record.height(), record.width());
    let nw = (round_half_up(w as f64 * d) as usize).max(1);
    let img = resize_bilinear(&record.image, h, nw)?;
    let src_x = |x: usize| -> usize {
        if nw == 1 {
            (w - 1) / 2
        } else {
            (round_half_up(x as f64 * (w - 1) as f64 / (nw - 1) as f64) as usize).min(w - 1)
        }
    };
    let cols: Vec<usize> = (0..nw).map(src_x).collect();
    let mask = Mask::from_fn(h, nw, |y, x| record.mask.get(y, cols[x]));
    let (img, mask) = if flip { (img.flip_x(), mask.flip_x()) } else { (img, mask) };

    // target column t reads source column t + off (negative off pads)
    let off = (nw as isize - w as isize).div_euclid(2);
    let mut out_img = Tensor::zeros(&[1, h, w]);
    let mut out_mask = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let sx = x as isize + off;
            if (0..nw as isize).contains(&sx) {
                let sx = sx as usize;
                *out_img.at3_mut(0, y, x) = img.at3(0, y, sx);
                out_mask.set(y, x, mask.get(y, sx));
            }
        }
    }
    SliceRecord::new(record.subject_id.clone(), record.slice_index, out_img, out_mask)
}

// ------------------------------------------------------------ restoration

/// Integer pixel range whose centers fall inside `[lo, hi)`.
pub(crate) fn pixel_span(lo: f64, hi: f64, limit: usize) -> std::ops::Range<usize> {
    let a = (lo - 0.5).ceil().max(0.0) as usize;
    let b = ((hi - 0.5).ceil().max(0.0) as usize).min(limit);
    a..b.max(a)
}

/// Pastes each ROI's `(1, N, N)` probability map into its box, merges
/// overlaps by per-pixel maximum and thresholds.
///
/// Pixel centers map into the map the same way RoIAlign bin centers map
/// into the box, so a uniform map covers exactly the pixels whose centers
/// lie inside the box.
pub fn restore_prob(rois: &[(BBox, Tensor)], h: usize, w: usize) -> Result<Tensor> {
    let mut acc = Tensor::zeros(&[1, h, w]);
    for (b, prob) in rois {
        let (c, ph, pw) = prob.dims3()?;
        if c != 1 {
            return Err(Error::Shape(format!("ROI probability map must have one channel, got {c}")));
        }
        let (bh, bw) = (b.height(), b.width());
        if !(bh > 0.0 && bw > 0.0) {
            return Err(Error::DegenerateBox(b.y1, b.x1, b.y2, b.x2));
        }
        let d = prob.data();
        for y in pixel_span(b.y1, b.y2, h) {
            let u = (y as f64 + 0.5 - b.y1) / bh * ph as f64 - 0.5;
            for x in pixel_span(b.x1, b.x2, w) {
                let v = (x as f64 + 0.5 - b.x1) / bw * pw as f64 - 0.5;
                let p: f64 = bilinear_taps(ph, pw, u, v).iter().map(|&(i, wt)| wt * d[i]).sum();
                let cell = acc.at3_mut(0, y, x);
                if p > *cell {
                    *cell = p;
                }
            }
        }
    }
    Ok(acc)
}

pub fn restore_masks(rois: &[(BBox, Tensor)], h: usize, w: usize, threshold: f64) -> Result<Mask> {
    Mask::from_tensor(&restore_prob(rois, h, w)?, threshold)
}

// ---------------------------------------------------------------- overlay

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];

/// Grayscale rendering of `image` with true positives green, false
/// positives red and false negatives blue.
pub fn render_overlay(gt: &Mask, pred: &Mask, image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 1 || (gt.h, gt.w) != (h, w) || (pred.h, pred.w) != (h, w) {
        return Err(Error::Shape(format!(
            "overlay inputs differ: image {:?}, gt {}x{}, pred {}x{}",
            image.shape(),
            gt.h,
            gt.w,
            pred.h,
            pred.w
        )));
    }
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb = Vec::with_capacity(3 * h * w);
    for (i, &v) in image.data().iter().enumerate() {
        let px = match (pred.bits[i], gt.bits[i]) {
            (true, true) => TP_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
            (false, false) => {
                let g = (round_half_up((v - lo) / span * 255.0)).clamp(0.0, 255.0) as u8;
                [g, g, g]
            }
        };
        rgb.extend_from_slice(&px);
    }
    Ok(RgbImage { h, w, rgb })
}

/// Pixel counts of the three overlay colors as `(tp, fp, fn)`; remaining
/// pixels are counted as `tn`.
pub fn overlay_counts(img: &RgbImage) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for px in img.rgb.chunks_exact(3) {
        match [px[0], px[1], px[2]] {
            TP_COLOR => c.tp += 1,
            FP_COLOR => c.fp += 1,
            FN_COLOR => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    c
}

// -------------------------------------------------------------- synthesis

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    pub size: usize,
    /// Inclusive range of blobs per slice.
    pub lesions: (usize, usize),
    /// Half-peak radius range in pixels.
    pub radius: (f64, f64),
    /// Peak contrast as a fraction of the tissue intensity.
    pub contrast: (f64, f64),
    pub tissue: f64,
    /// Amplitude of the smooth intensity field inside the brain.
    pub field_amplitude: f64,
    /// Control points per side of the smooth field.
    pub field_grid: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 40,
            slices_per_subject: 10,
            size: 512,
            lesions: (0, 5),
            radius: (1.0, 6.0),
            contrast: (0.15, 0.8),
            tissue: 1000.0,
            field_amplitude: 150.0,
            field_grid: 8,
            noise_sigma: 20.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_subjects > 0
            && self.slices_per_subject > 0
            && self.size >= 16
            && self.lesions.0 <= self.lesions.1
            && 0.0 < self.radius.0
            && self.radius.0 <= self.radius.1
            && 0.0 <= self.contrast.0
            && self.contrast.0 <= self.contrast.1
            && self.tissue > 0.0
            && self.field_grid >= 2
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic data settings {self:?}")))
        }
    }
}

/// Lesion blob placed by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub contrast: f64,
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Generates one slice from its own stream of the master seed.
pub fn synth_slice(cfg: &SynthConfig, subject: usize, slice: usize) -> Result<(SliceRecord, Vec<Blob>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((subject * cfg.slices_per_subject + slice) as u64);
    let s = cfg.size;
    let sf = s as f64;

    let (cy, cx) = (sf / 2.0 + rng.gen_range(-0.02..0.02) * sf, sf / 2.0 + rng.gen_range(-0.02..0.02) * sf);
    let (ay, ax) = (rng.gen_range(0.36..0.42) * sf, rng.gen_range(0.30..0.36) * sf);
    let inside = |y: f64, x: f64, shrink: f64| ((y - cy) / (ay * shrink)).powi(2) + ((x - cx) / (ax * shrink)).powi(2) <= 1.0;

    let g = cfg.field_grid;
    let coarse = Tensor::from_fn(&[1, g, g], |_| rng.gen_range(-1.0..1.0));
    let field = resize_bilinear(&coarse, s, s)?;

    let n_blobs = rng.gen_range(cfg.lesions.0..=cfg.lesions.1);
    let mut blobs = Vec::with_capacity(n_blobs);
    while blobs.len() < n_blobs {
        let y = rng.gen_range(0.0..sf);
        let x = rng.gen_range(0.0..sf);
        if !inside(y, x, 0.8) {
            continue;
        }
        blobs.push(Blob {
            cy: y,
            cx: x,
            radius: draw(&mut rng, cfg.radius),
            contrast: draw(&mut rng, cfg.contrast),
        });
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let half_peak = (2.0 * std::f64::consts::LN_2).sqrt();
    let mut image = Tensor::zeros(&[1, s, s]);
    let mut mask = Mask::empty(s, s);
    for y in 0..s {
        for x in 0..s {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = if inside(py, px, 1.0) {
                cfg.tissue + cfg.field_amplitude * field.at3(0, y, x)
            } else {
                0.0
            };
            for b in &blobs {
                let d2 = (py - b.cy).powi(2) + (px - b.cx).powi(2);
                let sigma = b.radius / half_peak;
                v += b.contrast * cfg.tissue * (-d2 / (2.0 * sigma * sigma)).exp();
                if d2 <= b.radius * b.radius {
                    mask.set(y, x, true);
                }
            }
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            *image.at3_mut(0, y, x) = round_half_up(v).clamp(0.0, 65535.0);
        }
    }
    let record = SliceRecord::new(format!("S{:03}", subject + 1), slice, image, mask)?;
    Ok((record, blobs))
}

/// Writes the dataset under `dir` and returns the manifest path.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let mut entries = Vec::with_capacity(cfg.n_subjects * cfg.slices_per_subject);
    for subject in 0..cfg.n_subjects {
        for slice in 0..cfg.slices_per_subject {
            let (rec, _) = synth_slice(cfg, subject, slice)?;
            let stem = format!("{}_{:03}", rec.subject_id, slice);
            entries.push(save_slice(
                &rec,
                &dir.join("images").join(format!("{stem}.pgm")),
                &dir.join("masks").join(format!("{stem}.pgm")),
            )?);
        }
    }
    let manifest = dir.join("manifest.json");
    Manifest::save(&manifest, &entries)?;
    Ok(manifest)
}
