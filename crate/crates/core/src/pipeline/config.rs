use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::crf::CrfParams;
use crate::data::{AugmentConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::hyperopt::BoConfig;
use crate::lrs::TrainConfig;
use crate::proposal::{roialign2_output_size, ExpansionConfig, ExpansionMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output channels of the stride-2 conv+ReLU blocks.
    pub widths: Vec<usize>,
    /// Channels of the final stride-1 conv (the feature map).
    pub feature_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            feature_channels: 256,
        }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    /// Height / width.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![4.0, 8.0, 16.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Sampling and bookkeeping of the joint trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Side of the square training crop; 0 trains on whole slices.
    pub crop: usize,
    /// Chance that a crop is centered near a lesion when the slice has one.
    pub lesion_crop_prob: f64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub roi_positive_iou: f64,
    /// Largest number of positive ROIs that also train the mask head per step.
    pub mask_rois: usize,
    /// Parameter-name prefixes excluded from updates, e.g. `backbone.`.
    pub freeze: Vec<String>,
    pub augment: bool,
    /// Epochs of mask-head retraining per k in the ablation.
    pub ablation_epochs: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            crop: 0,
            lesion_crop_prob: 0.7,
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
            rpn_positive_iou: 0.5,
            rpn_negative_iou: 0.3,
            roi_batch: 16,
            roi_positive_fraction: 0.5,
            roi_positive_iou: 0.5,
            mask_rois: 4,
            freeze: Vec::new(),
            augment: true,
            ablation_epochs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: f64,
    pub expansion_mode: ExpansionMode,
    /// `false` skips expansion (boxes are only rounded).
    pub expand: bool,
    pub proposal_cap: usize,
    pub nms_threshold: f64,
    /// Minimum lesion probability of the head for a ROI to be kept.
    pub detection_threshold: f64,
    pub mask_threshold: f64,
    /// RoIAlign1 output side.
    pub pool: usize,
    pub anchors: AnchorConfig,
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    pub lrs_hidden: usize,
    pub dcrf: bool,
    pub crf: CrfParams,
    pub sgd: TrainConfig,
    pub trainer: TrainerConfig,
    pub augment: AugmentConfig,
    /// Train / validation / test fractions by subject.
    pub split: (f64, f64, f64),
    pub bo: BoConfig,
    pub ablation_k: Vec<f64>,
    pub synth: SynthConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 1.3,
            expansion_mode: ExpansionMode::CenterScale,
            expand: true,
            proposal_cap: 50,
            nms_threshold: 0.7,
            detection_threshold: 0.5,
            mask_threshold: 0.5,
            pool: 7,
            anchors: AnchorConfig::default(),
            backbone: BackboneConfig::default(),
            head_hidden: 1024,
            lrs_hidden: 256,
            dcrf: true,
            crf: CrfParams::default(),
            sgd: TrainConfig::default(),
            trainer: TrainerConfig::default(),
            augment: AugmentConfig::default(),
            split: (0.7, 0.15, 0.15),
            bo: BoConfig::default(),
            ablation_k: vec![1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.7, 2.0, 3.0],
            synth: SynthConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Small network and crop-based training that fit a single CPU core.
    pub fn desk() -> Self {
        let d = Self::default();
        Self {
            backbone: BackboneConfig {
                widths: vec![8, 16],
                feature_channels: 16,
            },
            head_hidden: 64,
            lrs_hidden: 16,
            sgd: TrainConfig {
                lr: 0.005,
                max_epochs: 30,
                patience: 6,
                ..d.sgd.clone()
            },
            trainer: TrainerConfig {
                crop: 128,
                ..d.trainer.clone()
            },
            ..d
        }
    }

    pub fn expansion(&self) -> ExpansionConfig {
        ExpansionConfig {
            k: self.k,
            mode: self.expansion_mode,
        }
    }

    /// Side of the second RoIAlign's square output.
    pub fn roi2_size(&self) -> usize {
        roialign2_output_size(self.k)
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.k >= 1.0 && self.k.is_finite()) {
            return bad(format!("k = {} must be >= 1", self.k));
        }
        if self.proposal_cap == 0 || self.pool == 0 || self.head_hidden == 0 || self.lrs_hidden == 0 {
            return bad("proposal_cap, pool, head_hidden and lrs_hidden must be positive".into());
        }
        for (name, v) in [
            ("nms_threshold", self.nms_threshold),
            ("detection_threshold", self.detection_threshold),
            ("mask_threshold", self.mask_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if self.backbone.widths.is_empty() || self.backbone.widths.contains(&0) || self.backbone.feature_channels == 0 {
            return bad("backbone widths and feature channels must be positive".into());
        }
        if self.anchors.per_cell() == 0 || self.anchors.scales.iter().chain(&self.anchors.ratios).any(|&v| !(v > 0.0)) {
            return bad("anchor scales and ratios must be non-empty and positive".into());
        }
        let t = &self.trainer;
        if t.crop != 0 && t.crop % self.stride() != 0 {
            return bad(format!("training crop {} must be a multiple of the stride {}", t.crop, self.stride()));
        }
        if t.rpn_batch == 0 || t.roi_batch == 0 || !(t.rpn_negative_iou <= t.rpn_positive_iou) {
            return bad("invalid trainer sampling settings".into());
        }
        let (a, b, c) = self.split;
        if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be non-negative and sum to 1", self.split));
        }
        if self.ablation_k.iter().any(|&k| !(k >= 1.0)) {
            return bad("ablation k values must be >= 1".into());
        }
        self.crf.validate()?;
        self.sgd.validate()?;
        self.augment.validate()?;
        self.synth.validate()
    }

    /// Reads a JSON document or `key = value` lines over the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        Self::default().load_over(path)
    }

    /// Reads a JSON document or `key = value` lines over `self`; JSON
    /// objects merge key by key.
    pub fn load_over(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = if text.trim_start().starts_with('{') {
            let doc: Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            let mut root = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut root, doc);
            serde_json::from_value(root).map_err(|e| Error::format(path, e.to_string()))?
        } else {
            let mut pairs = Vec::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::format(path, format!("line {}: expected key = value", n + 1)))?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
            self.with_overrides(&pairs).map_err(|e| Error::format(path, e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies dotted `key = value` overrides; values parse as JSON and fall
    /// back to plain strings.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut root = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in pairs {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut node = &mut root;
            for part in key.split('.') {
                node = match node {
                    Value::Object(m) if m.contains_key(part) => m.get_mut(part).expect("checked"),
                    Value::Array(a) => match part.parse::<usize>().ok().and_then(|i| a.get_mut(i)) {
                        Some(v) => v,
                        None => return Err(Error::Config(format!("unknown key {key}"))),
                    },
                    _ => return Err(Error::Config(format!("unknown key {key}"))),
                };
            }
            *node = value;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}
