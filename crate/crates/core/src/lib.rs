//! Two-stage punctate-lesion segmentation on 2-D slices.
//!
//! The pipeline stages are:
//!
//! 1. **Backbone** – a small strided CNN producing a single feature level.
//! 2. **Proposals** – anchors, ReLU-gated objectness, NMS and a hard cap on
//!    the number of candidate regions.
//! 3. **Head** – RoIAlign to 7x7, class and box refinement.
//! 4. **Expansion** – refined boxes are grown by a factor `k` so the mask head
//!    sees the lesion's surroundings; the second RoIAlign is `R(14k)` square.
//! 5. **Mask head** – three convolutions (3x3, 3x3, 1x1) and a sigmoid.
//! 6. **Dense CRF** – mean-field refinement of each ROI's probability map.
//! 7. **Restoration** – per-ROI maps are pasted back into the full frame.
//!
//! Supporting modules cover evaluation metrics, Gaussian-process Bayesian
//! optimization of the CRF parameters, raster/manifest I/O and a synthetic
//! data generator.

pub mod crf;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod hyperopt;
pub mod lrs;
pub mod metrics;
pub mod pipeline;
pub mod proposal;
pub mod tensor;

pub use error::{Error, Result};
pub use proposal::BBox;
pub use tensor::{ConvLayer, ParamSet, Tensor};
