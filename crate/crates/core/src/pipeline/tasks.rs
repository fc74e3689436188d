//! Dataset-level tasks: evaluation, CRF tuning, the k ablation and overlays.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::CrfParams;
use crate::data::{load_slice, normalize, overlay_counts, render_overlay, write_ppm, Manifest, SliceRecord};
use crate::error::{Error, Result, StageContext};
use crate::hyperopt::{bo_loop, crf_params_from, BoResult, SearchSpace};
use crate::lrs::{sgd_train, LrsWeights, MaskSample, TrainConfig};
use crate::metrics::{aggregate, confusion, dsc, five_fold, slice_metrics, Aggregate, ConfusionCounts, Mask, SliceMetrics};
use crate::proposal::{clip_box, expand_box, roialign, roialign2_output_size, RoiAlignSpec};

use super::config::PipelineConfig;
use super::infer::{infer_rois, infer_slice, refine_and_restore, RoiCandidate};
use super::model::stub_backbone_forward;
use super::train::{component_boxes, mask_target, train};
use super::weights::PipelineWeights;

/// Loads every slice of `subjects` in manifest order.
pub fn load_records(manifest: &Manifest, subjects: &[String]) -> Result<Vec<SliceRecord>> {
    manifest.entries_for(subjects).map(load_slice).collect::<Result<_>>().stage("data")
}

/// Per-slice metrics of an arbitrary predictor, in record order.
pub fn evaluate_with(
    records: &[SliceRecord],
    mut predict: impl FnMut(&SliceRecord) -> Result<Mask>,
) -> Result<Vec<SliceMetrics>> {
    records
        .iter()
        .map(|r| {
            let pred = predict(r)?;
            slice_metrics(&r.subject_id, r.slice_index, &pred, &r.mask).stage("metrics")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub slices: Vec<SliceMetrics>,
    pub aggregate: Aggregate,
}

pub fn evaluate(records: &[SliceRecord], w: &PipelineWeights, cfg: &PipelineConfig) -> Result<Evaluation> {
    let slices = evaluate_with(records, |r| Ok(infer_slice(r, w, cfg)?.mask))?;
    Ok(Evaluation {
        aggregate: aggregate(&slices),
        slices,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub sd: f64,
}

impl MeanSd {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<Aggregate>,
    pub micro_dsc: MeanSd,
    pub mean_dsc: MeanSd,
    pub micro_sensitivity: MeanSd,
    pub micro_specificity: MeanSd,
}

/// Five subject-level folds: each trains on the other four (a validation
/// share of them held out for the schedule) and evaluates its test fold.
pub fn cross_validate(records: &[SliceRecord], cfg: &PipelineConfig) -> Result<CrossValidation> {
    let mut subjects: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
    subjects.dedup();
    let pick = |ids: &[String]| -> Vec<SliceRecord> {
        records.iter().filter(|r| ids.contains(&r.subject_id)).cloned().collect()
    };
    let (tr, va, _) = cfg.split;
    let mut folds = Vec::with_capacity(5);
    for fold in five_fold(&subjects, cfg.seed)? {
        let n = fold.train_val.len();
        let nv = ((n as f64 * va / (tr + va) + 0.5).floor() as usize).clamp(1, n - 1);
        let val = pick(&fold.train_val[..nv]);
        let train_set = pick(&fold.train_val[nv..]);
        let report = train(&train_set, &val, cfg, None).stage("train")?;
        folds.push(evaluate(&pick(&fold.test), &report.weights, cfg)?.aggregate);
    }
    let col = |f: &dyn Fn(&Aggregate) -> f64| MeanSd::of(&folds.iter().map(f).collect::<Vec<_>>());
    Ok(CrossValidation {
        micro_dsc: col(&|a| a.micro_dsc),
        mean_dsc: col(&|a| a.mean_dsc),
        micro_sensitivity: col(&|a| a.micro_sensitivity.unwrap_or(f64::NAN)),
        micro_specificity: col(&|a| a.micro_specificity.unwrap_or(f64::NAN)),
        folds,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrfTuning {
    pub params: CrfParams,
    /// Mean per-slice validation DSC of `params`.
    pub dsc: f64,
    pub space: SearchSpace,
    pub bo: BoResult,
}

struct CachedSlice {
    rois: Vec<RoiCandidate>,
    gt: Mask,
}

/// Mean per-slice DSC of cached ROIs under `crf`.
fn cached_dsc(cache: &[CachedSlice], crf: &CrfParams, threshold: f64) -> Result<f64> {
    let mut total = 0.0;
    for c in cache {
        let (mask, _) = refine_and_restore(&c.rois, Some(crf), c.gt.h, c.gt.w, threshold)?;
        total += dsc(&confusion(&mask, &c.gt)?);
    }
    Ok(total / cache.len() as f64)
}

/// Bayesian optimization of the CRF parameters on `val`, minimizing the
/// negative mean per-slice DSC. Everything up to the CRF is computed once.
pub fn tune_crf(val: &[SliceRecord], w: &PipelineWeights, cfg: &PipelineConfig) -> Result<CrfTuning> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("CRF tuning needs validation slices".into()));
    }
    let cache = val
        .iter()
        .map(|r| {
            Ok(CachedSlice {
                rois: infer_rois(r, w, cfg)?,
                gt: r.mask.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let space = SearchSpace::crf();
    let failure = RefCell::new(None);
    let objective = |v: &[f64]| -> f64 {
        match cached_dsc(&cache, &crf_params_from(&cfg.crf, v), cfg.mask_threshold) {
            Ok(d) => -d,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        }
    };
    let bo = bo_loop(objective, &space, &cfg.bo).stage("tune-crf")?;
    if let Some(e) = failure.into_inner() {
        return Err(Error::Stage {
            stage: "tune-crf",
            source: Box::new(e),
        });
    }
    Ok(CrfTuning {
        params: crf_params_from(&cfg.crf, &bo.best_params),
        dsc: -bo.best_value,
        space,
        bo,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: f64,
    pub n: usize,
    pub mean_dsc: f64,
    pub micro_dsc: f64,
    pub slices: usize,
}

/// Mask-head samples for expansion factor `k`: every ground-truth lesion
/// box of every slice, expanded, pooled from the trained backbone.
pub fn mask_samples(records: &[SliceRecord], w: &PipelineWeights, cfg: &PipelineConfig) -> Result<Vec<MaskSample>> {
    let n = cfg.roi2_size();
    let spec = RoiAlignSpec::new(n, n, 1.0 / cfg.stride() as f64);
    let mut out = Vec::new();
    for r in records {
        let boxes = component_boxes(&r.mask);
        if boxes.is_empty() {
            continue;
        }
        let features = stub_backbone_forward(&normalize(&r.image), w).stage("backbone")?;
        for b in boxes {
            let Ok(e) = clip_box(&expand_box(&b, &cfg.expansion())?, r.height(), r.width()) else {
                continue;
            };
            out.push(MaskSample {
                patch: roialign(&features, &e, &spec)?,
                target: mask_target(&r.mask, &e, n),
            });
        }
    }
    Ok(out)
}

/// For each k: retrains the segmentation head from a seeded initialization
/// on `k`-expanded lesion patches, then evaluates the whole pipeline on
/// `test` with that head and expansion factor.
pub fn ablate_k(
    train_set: &[SliceRecord],
    val: &[SliceRecord],
    test: &[SliceRecord],
    w: &PipelineWeights,
    cfg: &PipelineConfig,
    ks: &[f64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let ck = PipelineConfig { k, ..cfg.clone() };
        ck.validate()?;
        let tr = mask_samples(train_set, w, &ck)?;
        let va = mask_samples(val, w, &ck)?;
        if tr.is_empty() || va.is_empty() {
            return Err(Error::InvalidArgument("ablation needs lesions in the training and validation slices".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = LrsWeights::init(w.feature_channels(), cfg.lrs_hidden, &mut rng);
        let tc = TrainConfig {
            max_epochs: cfg.trainer.ablation_epochs,
            shuffle_seed: cfg.seed,
            ..cfg.sgd.clone()
        };
        let outcome = sgd_train(init, &tr, &va, &tc).stage("ablation")?;
        let mut wk = w.clone();
        wk.lrs = outcome.model;
        wk.quantize();
        let agg = evaluate(test, &wk, &ck)?.aggregate;
        rows.push(AblationRow {
            k,
            n: roialign2_output_size(k),
            mean_dsc: agg.mean_dsc,
            micro_dsc: agg.micro_dsc,
            slices: agg.slices,
        });
    }
    Ok(rows)
}

/// `k,n,mean_dsc,micro_dsc,slices`
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("k,n,mean_dsc,micro_dsc,slices\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.k, r.n, r.mean_dsc, r.micro_dsc, r.slices).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayRow {
    pub subject_id: String,
    pub slice_index: usize,
    /// Pixel counts of the rendered colors.
    pub colors: ConfusionCounts,
    /// Confusion counts of the prediction.
    pub counts: ConfusionCounts,
}

/// Writes `{subject}_{slice}.ppm` overlays into `dir`.
pub fn write_overlays(
    records: &[SliceRecord],
    w: &PipelineWeights,
    cfg: &PipelineConfig,
    dir: &Path,
) -> Result<Vec<OverlayRow>> {
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let pred = infer_slice(r, w, cfg)?.mask;
        let img = render_overlay(&r.mask, &pred, &r.image).stage("overlay")?;
        write_ppm(&dir.join(format!("{}_{:03}.ppm", r.subject_id, r.slice_index)), &img).stage("overlay")?;
        rows.push(OverlayRow {
            subject_id: r.subject_id.clone(),
            slice_index: r.slice_index,
            colors: overlay_counts(&img),
            counts: confusion(&pred, &r.mask)?,
        });
    }
    Ok(rows)
}

/// `subject,slice,green,red,blue,tp,fp,fn`
pub fn overlay_csv(rows: &[OverlayRow]) -> String {
    let mut s = String::from("subject,slice,green,red,blue,tp,fp,fn\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.subject_id, r.slice_index, r.colors.tp, r.colors.fp, r.colors.fn_, r.counts.tp, r.counts.fp, r.counts.fn_
        )
        .unwrap();
    }
    s
}
