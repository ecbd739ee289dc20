//! Boxes, detections and labeled images — the geometry every other module
//! builds on.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Axis-aligned box in continuous pixel coordinates, origin top-left,
/// x right, y down. Strictly positive extent on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.x1, self.y1, self.x2, self.y2];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(self.invalid("coordinates must be finite"));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(self.invalid("extent must be strictly positive"));
        }
        Ok(())
    }

    fn invalid(&self, reason: &'static str) -> Error {
        Error::InvalidBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
            reason,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Intersect with `[0, w] x [0, h]`; `None` when the clipped box would be
    /// degenerate.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let x1 = self.x1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x2 = self.x2.min(w);
        let y2 = self.y2.min(h);
        if x1 < x2 && y1 < y2 {
            Some(BBox { x1, y1, x2, y2 })
        } else {
            None
        }
    }

    /// Whether this box lies entirely within `[0, w] x [0, h]`.
    pub fn within(&self, w: f64, h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }
}

/// Intersection area over union area; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A box with a class and a confidence — both a model prediction and (with
/// confidence 1.0) a ground-truth annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, confidence: f64) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidDetection(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Detection {
            bbox,
            class_id,
            confidence,
        })
    }

    /// Ground-truth detection (confidence pinned to 1).
    pub fn ground_truth(bbox: BBox, class_id: usize) -> Self {
        Detection {
            bbox,
            class_id,
            confidence: 1.0,
        }
    }
}

/// An image together with its (possibly empty) annotations. Unlabeled target
/// images carry an empty label list.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Raster,
    pub labels: Vec<Detection>,
}

impl LabeledImage {
    /// Check that every label box lies within the image bounds.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width() as f64, self.image.height() as f64);
        for d in &self.labels {
            d.bbox.validate()?;
            if !d.bbox.within(w, h) {
                return Err(Error::TargetOutOfBounds {
                    x1: d.bbox.x1,
                    y1: d.bbox.y1,
                    x2: d.bbox.x2,
                    y2: d.bbox.y2,
                    w: self.image.width(),
                    h: self.image.height(),
                });
            }
        }
        Ok(())
    }
}

/// One JSON-lines record: the detections of a single image.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub detections: Vec<DetectionJson>,
}

/// Wire form of a detection: `{"box": [x1, y1, x2, y2], "class": c, "conf": p}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionJson {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class: usize,
    pub conf: f64,
}

impl From<&Detection> for DetectionJson {
    fn from(d: &Detection) -> Self {
        DetectionJson {
            bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
            class: d.class_id,
            conf: d.confidence,
        }
    }
}

impl DetectionJson {
    pub fn to_detection(&self) -> Result<Detection> {
        Detection::new(
            BBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])?,
            self.class,
            self.conf,
        )
    }
}

impl DetectionRecord {
    pub fn from_detections(image_id: impl Into<String>, dets: &[Detection]) -> Self {
        DetectionRecord {
            image_id: image_id.into(),
            detections: dets.iter().map(DetectionJson::from).collect(),
        }
    }
}

/// Write one JSON-lines record per image.
pub fn write_detections_jsonl<W: Write>(
    mut w: W,
    records: &[DetectionRecord],
) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("writing detections", e))?;
    }
    Ok(())
}

/// Read back records produced by [`write_detections_jsonl`].
pub fn read_detections_jsonl<R: BufRead>(r: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("reading detections", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identical_boxes() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_partial_overlap_hand_computed() {
        // intersection 5x5 = 25, union 100 + 100 - 25 = 175
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BBox::new(5.0, 0.0, 5.0, 10.0).is_err());
        assert!(BBox::new(0.0, 8.0, 10.0, 3.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn confidence_bounds_enforced() {
        let b = bb(0.0, 0.0, 1.0, 1.0);
        assert!(Detection::new(b, 0, 1.1).is_err());
        assert!(Detection::new(b, 0, -0.1).is_err());
        assert!(Detection::new(b, 0, 0.0).is_ok());
    }

    #[test]
    fn clip_drops_degenerate() {
        let b = bb(-5.0, -5.0, -1.0, 10.0);
        assert!(b.clip(20.0, 20.0).is_none());
        let c = bb(-5.0, -5.0, 4.0, 4.0).clip(20.0, 20.0).unwrap();
        assert_eq!(c, bb(0.0, 0.0, 4.0, 4.0));
    }

    #[test]
    fn jsonl_round_trip() {
        let dets = vec![
            Detection::new(bb(1.0, 2.0, 3.5, 4.5), 2, 0.75).unwrap(),
            Detection::ground_truth(bb(0.0, 0.0, 8.0, 8.0), 0),
        ];
        let records = vec![
            DetectionRecord::from_detections("img-000", &dets),
            DetectionRecord::from_detections("img-001", &[]),
        ];
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"image_id\":\"img-000\""));
        assert!(text.lines().next().unwrap().contains("\"box\":[1.0,2.0,3.5,4.5]"));
        let back = read_detections_jsonl(&buf[..]).unwrap();
        assert_eq!(back, records);
        assert_eq!(
            back[0].detections[0].to_detection().unwrap(),
            dets[0]
        );
    }
}
