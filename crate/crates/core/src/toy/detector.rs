//! A small single-stage grid detector: four stride-2 conv layers and a 1x1
//! head predicting per-cell objectness, box offsets, and class scores. It
//! exists to exercise the adaptation machinery at desk scale, so it stays
//! anchor-free and deliberately tiny while honoring every detector contract
//! (deterministic inference, exact gradients, indexed parameter access).

use ndarray::{Array3, ArrayD};
use serde::{Deserialize, Serialize};

use super::nn::{Conv2d, ConvStack};
use crate::detection::{iou, BBox, Detection};
use crate::detector::{DetectorModel, LossGrad, ParamSet};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::derive_rng;

/// Input is downsampled by 2^4 = 16: a 128px image yields an 8x8 grid.
const DOWNSAMPLE: usize = 16;
const NUM_STRIDE2_LAYERS: usize = 4;

/// Center offsets decode as `1.5 * sigmoid(t) - 0.25`, overshooting the cell
/// by a quarter on each side so centers near cell boundaries do not need
/// saturated logits.
const OFFSET_SCALE: f64 = 1.5;
const OFFSET_SHIFT: f64 = -0.25;

fn offset_target(frac: f64) -> f64 {
    (frac - OFFSET_SHIFT) / OFFSET_SCALE
}

fn offset_decode(s: f64) -> f64 {
    OFFSET_SCALE * s + OFFSET_SHIFT
}

/// Loss term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Objectness BCE at cells containing a target center.
    pub obj: f64,
    /// Objectness BCE at empty cells.
    pub noobj: f64,
    /// Box offset regression at positive cells.
    pub bbox: f64,
    /// Class cross-entropy at positive cells.
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            obj: 4.0,
            noobj: 1.0,
            bbox: 8.0,
            class: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDetectorConfig {
    /// Square input edge; must be a multiple of 16.
    pub input_size: usize,
    /// Channel widths of the four stride-2 layers.
    pub channels: [usize; 4],
    pub num_classes: usize,
    /// Detections below this confidence are not emitted.
    pub conf_floor: f64,
    /// Per-class NMS IoU threshold.
    pub nms_iou: f64,
    pub loss_weights: LossWeights,
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        ToyDetectorConfig {
            input_size: 128,
            channels: [16, 32, 48, 64],
            num_classes: 3,
            conf_floor: 0.05,
            nms_iou: 0.3,
            loss_weights: LossWeights::default(),
        }
    }
}

impl ToyDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % DOWNSAMPLE != 0 {
            return Err(Error::InvalidConfig {
                key: "detector.input_size".into(),
                reason: format!("must be a positive multiple of {DOWNSAMPLE}"),
            });
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig {
                key: "detector.num_classes".into(),
                reason: "must be at least 1".into(),
            });
        }
        if !(0.0..1.0).contains(&self.conf_floor) {
            return Err(Error::InvalidConfig {
                key: "detector.conf_floor".into(),
                reason: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

/// The trainable grid detector.
#[derive(Debug, Clone)]
pub struct ToyDetector {
    stack: ConvStack,
    config: ToyDetectorConfig,
    architecture: String,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable binary cross-entropy with logits.
fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
}

fn raster_to_chw(image: &Raster) -> Array3<f64> {
    let (h, w) = (image.height(), image.width());
    Array3::from_shape_fn((3, h, w), |(c, y, x)| image.data()[(y, x, c)])
}

impl ToyDetector {
    pub fn new(config: ToyDetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(seed, "toy-detector-init", &[]);
        let head_ch = 5 + config.num_classes;
        let widths = config.channels;
        let mut layers = Vec::with_capacity(NUM_STRIDE2_LAYERS + 1);
        let mut c_in = 3;
        for &c_out in widths.iter() {
            layers.push(Conv2d::new(c_in, c_out, 3, 2, 1, &mut rng));
            c_in = c_out;
        }
        let mut head = Conv2d::new(c_in, head_ch, 1, 1, 0, &mut rng);
        // Bias priors: start objectness low and box extents near typical
        // object sizes so early training is not dominated by saturation.
        head.bias[0] = -2.0;
        head.bias[3] = -1.4;
        head.bias[4] = -1.4;
        let architecture = format!(
            "toy-grid-v1(in={0}x{0},channels={1:?},classes={2})",
            config.input_size, config.channels, config.num_classes
        );
        Ok(ToyDetector {
            stack: ConvStack { layers },
            config,
            architecture,
        })
    }

    pub fn config(&self) -> &ToyDetectorConfig {
        &self.config
    }

    pub fn grid_size(&self) -> usize {
        self.config.input_size / DOWNSAMPLE
    }

    fn cell_size(&self) -> f64 {
        DOWNSAMPLE as f64
    }

    fn check_shape(&self, image: &Raster) -> Result<()> {
        let s = self.config.input_size;
        if image.height() != s || image.width() != s {
            return Err(Error::DimensionMismatch {
                got_h: image.height(),
                got_w: image.width(),
                want_h: s,
                want_w: s,
            });
        }
        Ok(())
    }

    /// Decode a head map into thresholded, NMS-filtered detections.
    fn decode(&self, head: &Array3<f64>) -> Vec<Detection> {
        let g = self.grid_size();
        let size = self.config.input_size as f64;
        let cell = self.cell_size();
        let nc = self.config.num_classes;
        let mut dets: Vec<Detection> = Vec::new();
        for gy in 0..g {
            for gx in 0..g {
                let obj = sigmoid(head[(0, gy, gx)]);
                // Stable softmax over class logits.
                let mut max_logit = f64::NEG_INFINITY;
                for c in 0..nc {
                    max_logit = max_logit.max(head[(5 + c, gy, gx)]);
                }
                let mut denom = 0.0;
                for c in 0..nc {
                    denom += (head[(5 + c, gy, gx)] - max_logit).exp();
                }
                let (mut best_c, mut best_p) = (0usize, 0.0f64);
                for c in 0..nc {
                    let p = (head[(5 + c, gy, gx)] - max_logit).exp() / denom;
                    if p > best_p {
                        best_p = p;
                        best_c = c;
                    }
                }
                let conf = obj * best_p;
                if conf < self.config.conf_floor {
                    continue;
                }
                let cx = (gx as f64 + offset_decode(sigmoid(head[(1, gy, gx)]))) * cell;
                let cy = (gy as f64 + offset_decode(sigmoid(head[(2, gy, gx)]))) * cell;
                let w = sigmoid(head[(3, gy, gx)]) * size;
                let h = sigmoid(head[(4, gy, gx)]) * size;
                let raw = BBox {
                    x1: cx - w / 2.0,
                    y1: cy - h / 2.0,
                    x2: cx + w / 2.0,
                    y2: cy + h / 2.0,
                };
                // Clip to the image; degenerate leftovers are dropped here so
                // callers never see invalid geometry.
                if let Some(bbox) = raw.clip(size, size) {
                    dets.push(Detection {
                        bbox,
                        class_id: best_c,
                        confidence: conf,
                    });
                }
            }
        }
        self.nms(dets)
    }

    fn nms(&self, mut dets: Vec<Detection>) -> Vec<Detection> {
        dets.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap()
                .then(a.class_id.cmp(&b.class_id))
        });
        let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
        'outer: for d in dets {
            for k in &keep {
                if k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > self.config.nms_iou {
                    continue 'outer;
                }
            }
            keep.push(d);
        }
        keep
    }

    /// Per-cell supervision: the first target whose box center lands in a
    /// cell claims it.
    fn assign_targets(&self, targets: &[Detection]) -> Vec<Option<(f64, f64, f64, f64, usize)>> {
        let g = self.grid_size();
        let size = self.config.input_size as f64;
        let cell = self.cell_size();
        let mut slots: Vec<Option<(f64, f64, f64, f64, usize)>> = vec![None; g * g];
        for t in targets {
            let (cx, cy) = t.bbox.center();
            let gx = ((cx / cell).floor() as usize).min(g - 1);
            let gy = ((cy / cell).floor() as usize).min(g - 1);
            let slot = &mut slots[gy * g + gx];
            if slot.is_none() {
                *slot = Some((
                    offset_target(cx / cell - gx as f64),
                    offset_target(cy / cell - gy as f64),
                    t.bbox.width() / size,
                    t.bbox.height() / size,
                    t.class_id,
                ));
            }
        }
        slots
    }

    fn stack_grads_to_paramset(grads: Vec<(ndarray::Array2<f64>, ndarray::Array1<f64>)>) -> ParamSet {
        let mut arrays: Vec<ArrayD<f64>> = Vec::with_capacity(grads.len() * 2);
        for (dw, db) in grads {
            arrays.push(dw.into_dyn());
            arrays.push(db.into_dyn());
        }
        ParamSet::new(arrays)
    }
}

impl DetectorModel for ToyDetector {
    fn architecture(&self) -> &str {
        &self.architecture
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn infer(&self, image: &Raster) -> Result<Vec<Detection>> {
        self.check_shape(image)?;
        let x = raster_to_chw(image);
        let head = self.stack.forward(&x);
        Ok(self.decode(&head))
    }

    fn detection_loss(&self, image: &Raster, targets: &[Detection]) -> Result<LossGrad> {
        self.check_shape(image)?;
        if targets.is_empty() {
            return Err(Error::EmptyTargets);
        }
        let size = self.config.input_size as f64;
        for t in targets {
            t.bbox.validate()?;
            if !t.bbox.within(size, size) {
                return Err(Error::TargetOutOfBounds {
                    x1: t.bbox.x1,
                    y1: t.bbox.y1,
                    x2: t.bbox.x2,
                    y2: t.bbox.y2,
                    w: self.config.input_size,
                    h: self.config.input_size,
                });
            }
        }

        let x = raster_to_chw(image);
        let (head, cache) = self.stack.forward_train(&x);
        let g = self.grid_size();
        let nc = self.config.num_classes;
        let lw = self.config.loss_weights;
        let slots = self.assign_targets(targets);
        let n_cells = (g * g) as f64;
        let n_pos = slots.iter().filter(|s| s.is_some()).count() as f64;
        debug_assert!(n_pos >= 1.0);

        let mut loss = 0.0;
        let mut d_head: Array3<f64> = Array3::zeros(head.raw_dim());

        for gy in 0..g {
            for gx in 0..g {
                let slot = slots[gy * g + gx];
                let z_obj = head[(0, gy, gx)];
                let (y_obj, w_or_no) = if slot.is_some() {
                    (1.0, lw.obj)
                } else {
                    (0.0, lw.noobj)
                };
                loss += w_or_no * bce_with_logits(z_obj, y_obj) / n_cells;
                d_head[(0, gy, gx)] = w_or_no * (sigmoid(z_obj) - y_obj) / n_cells;

                if let Some((tx, ty, tw, th, cls)) = slot {
                    // Box offsets, sigmoid-space MSE.
                    for (ch, target) in [(1, tx), (2, ty), (3, tw), (4, th)] {
                        let z = head[(ch, gy, gx)];
                        let s = sigmoid(z);
                        loss += lw.bbox * (s - target).powi(2) / n_pos;
                        d_head[(ch, gy, gx)] =
                            lw.bbox * 2.0 * (s - target) * s * (1.0 - s) / n_pos;
                    }
                    // Class cross-entropy via stable log-softmax.
                    let mut max_logit = f64::NEG_INFINITY;
                    for c in 0..nc {
                        max_logit = max_logit.max(head[(5 + c, gy, gx)]);
                    }
                    let mut denom = 0.0;
                    for c in 0..nc {
                        denom += (head[(5 + c, gy, gx)] - max_logit).exp();
                    }
                    let log_denom = denom.ln() + max_logit;
                    loss += lw.class * (log_denom - head[(5 + cls, gy, gx)]) / n_pos;
                    for c in 0..nc {
                        let p = (head[(5 + c, gy, gx)] - log_denom).exp();
                        let y = if c == cls { 1.0 } else { 0.0 };
                        d_head[(5 + c, gy, gx)] = lw.class * (p - y) / n_pos;
                    }
                }
            }
        }

        let grads = self.stack.backward(&cache, d_head);
        Ok(LossGrad {
            loss,
            grads: Self::stack_grads_to_paramset(grads),
        })
    }

    fn params(&self) -> ParamSet {
        let mut arrays: Vec<ArrayD<f64>> = Vec::with_capacity(self.stack.layers.len() * 2);
        for layer in &self.stack.layers {
            arrays.push(layer.weight.clone().into_dyn());
            arrays.push(layer.bias.clone().into_dyn());
        }
        ParamSet::new(arrays)
    }

    fn set_params(&mut self, params: &ParamSet) -> Result<()> {
        if params.arrays.len() != self.stack.layers.len() * 2 {
            return Err(Error::ArchitectureMismatch {
                left: self.architecture.clone(),
                right: format!("{} parameter arrays", params.arrays.len()),
            });
        }
        for (i, layer) in self.stack.layers.iter_mut().enumerate() {
            let w = &params.arrays[2 * i];
            let b = &params.arrays[2 * i + 1];
            if w.shape() != layer.weight.shape() || b.shape() != layer.bias.shape() {
                return Err(Error::ArchitectureMismatch {
                    left: self.architecture.clone(),
                    right: format!("array {i} shape {:?}/{:?}", w.shape(), b.shape()),
                });
            }
            layer.weight = w
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("weight rank");
            layer.bias = b
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("bias rank");
        }
        Ok(())
    }
}

/// Convert `(gy, gx)` cell plus normalized offsets back to a box; test helper
/// for sanity-checking encode/decode symmetry.
#[cfg(test)]
pub(crate) fn encode_decode_identity(det: &ToyDetector, b: &BBox) -> BBox {
    let cell = det.cell_size();
    let size = det.config.input_size as f64;
    let (cx, cy) = b.center();
    let gx = ((cx / cell).floor() as usize).min(det.grid_size() - 1);
    let gy = ((cy / cell).floor() as usize).min(det.grid_size() - 1);
    let tx = cx / cell - gx as f64;
    let ty = cy / cell - gy as f64;
    let w = b.width();
    let h = b.height();
    let cx2 = (gx as f64 + tx) * cell;
    let cy2 = (gy as f64 + ty) * cell;
    let _ = size;
    BBox {
        x1: cx2 - w / 2.0,
        y1: cy2 - h / 2.0,
        x2: cx2 + w / 2.0,
        y2: cy2 + h / 2.0,
    }
}
