//! Source-free detect-augment-compose-adapt (SF-DACA) for object detection.
//!
//! A source-pretrained detector is adapted to an unlabeled target domain by
//! mining its own confident predictions: each target image is split into
//! quadrants, the quadrant with the highest mean detection confidence is
//! cropped, augmented four times and reassembled into a composite training
//! image whose transported pseudo-labels supervise the student. A frozen
//! teacher (refreshed once per epoch by an exponential moving average of the
//! student) supplies a consistency loss that keeps the student from
//! collapsing.
//!
//! The crate ships the full pipeline plus a desk-scale benchmark: a
//! procedural two-domain shape dataset ([`toy`]), a small trainable grid
//! detector behind the [`DetectorModel`] interface, greedy-matching AP/mAP
//! evaluation ([`eval`]), and experiment plumbing (config files, checkpoints,
//! metrics logs) used by the `sfdaca` CLI.

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod daca;
pub mod detection;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod raster;
pub mod rng;
pub mod toy;

pub use adapt::{adapt, ema_update, filter_pseudo_labels, AdaptConfig, AdaptOutcome};
pub use detection::{iou, BBox, Detection, LabeledImage};
pub use detector::{clone_model, DetectorModel, LossGrad, ParamSet};
pub use error::{Error, Result};
pub use raster::Raster;
