//! Detect-augment-compose: quadrant scoring, confident-region selection, and
//! the 2x2 composite construction that turns one confident crop into a
//! challenging self-training image.

mod augment;
mod compose;

pub use augment::{
    apply_augment, sample_augment_chain, AugmentChain, AugmentConfig, AugmentKind, AugmentOp,
};
pub use compose::{compose, CompositePackage};

use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::raster::Raster;

/// The four image quadrants, in fixed slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuadrantId {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl QuadrantId {
    /// Slot order used everywhere: TL, TR, BL, BR. Doubles as the
    /// tie-breaking priority when two quadrants share the best mean.
    pub const ALL: [QuadrantId; 4] = [
        QuadrantId::TopLeft,
        QuadrantId::TopRight,
        QuadrantId::BottomLeft,
        QuadrantId::BottomRight,
    ];

    pub fn index(self) -> usize {
        match self {
            QuadrantId::TopLeft => 0,
            QuadrantId::TopRight => 1,
            QuadrantId::BottomLeft => 2,
            QuadrantId::BottomRight => 3,
        }
    }

    /// (row, col) of this quadrant in the 2x2 layout.
    pub fn grid_pos(self) -> (usize, usize) {
        match self {
            QuadrantId::TopLeft => (0, 0),
            QuadrantId::TopRight => (0, 1),
            QuadrantId::BottomLeft => (1, 0),
            QuadrantId::BottomRight => (1, 1),
        }
    }

    /// Pixel bounds `(x0, y0, x1, y1)` of this quadrant in a `w x h` image.
    /// The split lines sit at `floor(w/2)` / `floor(h/2)`; for odd sizes the
    /// remainder row/column belongs to the right/bottom quadrants.
    pub fn rect(self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let wl = w / 2;
        let hl = h / 2;
        match self {
            QuadrantId::TopLeft => (0, 0, wl, hl),
            QuadrantId::TopRight => (wl, 0, w, hl),
            QuadrantId::BottomLeft => (0, hl, wl, h),
            QuadrantId::BottomRight => (wl, hl, w, h),
        }
    }
}

/// Per-quadrant detection counts and mean confidences. A mean is present
/// exactly when the quadrant has at least one assigned detection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionScores {
    counts: [usize; 4],
    sums: [f64; 4],
}

impl RegionScores {
    pub fn detection_count(&self, q: QuadrantId) -> usize {
        self.counts[q.index()]
    }

    pub fn mean_confidence(&self, q: QuadrantId) -> Option<f64> {
        let i = q.index();
        if self.counts[i] > 0 {
            Some(self.sums[i] / self.counts[i] as f64)
        } else {
            None
        }
    }

    /// Quadrant with the highest present mean confidence. Ties resolve by
    /// the fixed priority TL > TR > BL > BR; `None` when every quadrant is
    /// empty.
    pub fn best(&self) -> Option<QuadrantId> {
        let mut best: Option<(QuadrantId, f64)> = None;
        for q in QuadrantId::ALL {
            if let Some(mean) = self.mean_confidence(q) {
                match best {
                    Some((_, m)) if mean <= m => {}
                    _ => best = Some((q, mean)),
                }
            }
        }
        best.map(|(q, _)| q)
    }
}

/// Quadrant containing the box center; centers exactly on a dividing line go
/// to the left/top quadrant.
pub fn assign_quadrant(det: &Detection, image_w: usize, image_h: usize) -> QuadrantId {
    let (cx, cy) = det.bbox.center();
    let left = cx <= (image_w / 2) as f64;
    let top = cy <= (image_h / 2) as f64;
    match (top, left) {
        (true, true) => QuadrantId::TopLeft,
        (true, false) => QuadrantId::TopRight,
        (false, true) => QuadrantId::BottomLeft,
        (false, false) => QuadrantId::BottomRight,
    }
}

/// Per-quadrant mean confidence of the detections whose centers fall in it.
pub fn score_regions(dets: &[Detection], image_w: usize, image_h: usize) -> RegionScores {
    let mut scores = RegionScores::default();
    for d in dets {
        let i = assign_quadrant(d, image_w, image_h).index();
        scores.counts[i] += 1;
        scores.sums[i] += d.confidence;
    }
    scores
}

/// The winning quadrant: its crop and the assigned detections re-expressed
/// in crop-local coordinates.
#[derive(Debug, Clone)]
pub struct RegionSelection {
    pub quadrant: QuadrantId,
    pub crop: Raster,
    /// Non-empty; every box lies within the crop bounds.
    pub labels: Vec<Detection>,
}

/// Crop the quadrant with the highest mean detection confidence and carry
/// its detections along, translated to crop coordinates and clipped to the
/// crop. `None` when there are no detections at all (skip this image).
///
/// Callers are expected to confidence-filter `dets` first.
pub fn select_confident_region(image: &Raster, dets: &[Detection]) -> Option<RegionSelection> {
    let (w, h) = (image.width(), image.height());
    let scores = score_regions(dets, w, h);
    let quadrant = scores.best()?;
    let (x0, y0, x1, y1) = quadrant.rect(w, h);
    let crop = image.crop(x0, y0, x1, y1);
    let (cw, ch) = ((x1 - x0) as f64, (y1 - y0) as f64);

    let labels: Vec<Detection> = dets
        .iter()
        .filter(|d| assign_quadrant(d, w, h) == quadrant)
        .filter_map(|d| {
            let moved = d.bbox.translate(-(x0 as f64), -(y0 as f64));
            // The center is inside the closed crop, so clipping keeps a
            // positive-area box; straddling boxes lose their outside part.
            moved.clip(cw, ch).map(|bbox| Detection {
                bbox,
                class_id: d.class_id,
                confidence: d.confidence,
            })
        })
        .collect();

    debug_assert!(!labels.is_empty());
    Some(RegionSelection {
        quadrant,
        crop,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;

    fn det(cx: f64, cy: f64, half: f64, conf: f64) -> Detection {
        Detection::new(
            BBox::new(cx - half, cy - half, cx + half, cy + half).unwrap(),
            0,
            conf,
        )
        .unwrap()
    }

    #[test]
    fn center_quadrant_assignment() {
        assert_eq!(
            assign_quadrant(&det(25.0, 25.0, 5.0, 0.9), 100, 100),
            QuadrantId::TopLeft
        );
        assert_eq!(
            assign_quadrant(&det(75.0, 25.0, 5.0, 0.9), 100, 100),
            QuadrantId::TopRight
        );
        assert_eq!(
            assign_quadrant(&det(25.0, 75.0, 5.0, 0.9), 100, 100),
            QuadrantId::BottomLeft
        );
        assert_eq!(
            assign_quadrant(&det(75.0, 75.0, 5.0, 0.9), 100, 100),
            QuadrantId::BottomRight
        );
    }

    #[test]
    fn dividing_line_ties_go_left_top() {
        // All four boundary cases around the center lines of a 100x100 image.
        assert_eq!(
            assign_quadrant(&det(50.0, 50.0, 5.0, 0.9), 100, 100),
            QuadrantId::TopLeft
        );
        assert_eq!(
            assign_quadrant(&det(50.0, 75.0, 5.0, 0.9), 100, 100),
            QuadrantId::BottomLeft
        );
        assert_eq!(
            assign_quadrant(&det(75.0, 50.0, 5.0, 0.9), 100, 100),
            QuadrantId::TopRight
        );
        assert_eq!(
            assign_quadrant(&det(50.0 + 1e-9, 50.0, 5.0, 0.9), 100, 100),
            QuadrantId::TopRight
        );
    }

    #[test]
    fn region_means_match_hand_averages() {
        let dets = vec![
            det(25.0, 25.0, 5.0, 0.9),  // TL
            det(75.0, 25.0, 5.0, 0.6),  // TR
            det(75.0, 30.0, 5.0, 0.8),  // TR
            det(25.0, 75.0, 5.0, 0.95), // BL
        ];
        let s = score_regions(&dets, 100, 100);
        assert_eq!(s.mean_confidence(QuadrantId::TopLeft), Some(0.9));
        assert!((s.mean_confidence(QuadrantId::TopRight).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(s.mean_confidence(QuadrantId::BottomLeft), Some(0.95));
        assert_eq!(s.mean_confidence(QuadrantId::BottomRight), None);
        assert_eq!(s.detection_count(QuadrantId::BottomRight), 0);
        assert_eq!(s.detection_count(QuadrantId::TopRight), 2);
    }

    #[test]
    fn empty_input_scores_all_absent() {
        let s = score_regions(&[], 100, 100);
        for q in QuadrantId::ALL {
            assert_eq!(s.mean_confidence(q), None);
            assert_eq!(s.detection_count(q), 0);
        }
        assert_eq!(s.best(), None);
    }

    #[test]
    fn single_detection_scores_its_quadrant_only() {
        let s = score_regions(&[det(25.0, 25.0, 5.0, 0.5)], 100, 100);
        assert_eq!(s.mean_confidence(QuadrantId::TopLeft), Some(0.5));
        for q in [
            QuadrantId::TopRight,
            QuadrantId::BottomLeft,
            QuadrantId::BottomRight,
        ] {
            assert_eq!(s.mean_confidence(q), None);
        }
    }

    #[test]
    fn selects_highest_mean_and_translates_labels() {
        let image = Raster::new(100, 100);
        let dets = vec![
            det(25.0, 25.0, 5.0, 0.9),
            det(75.0, 25.0, 5.0, 0.6),
            det(75.0, 30.0, 5.0, 0.8),
            det(25.0, 75.0, 5.0, 0.95),
        ];
        let sel = select_confident_region(&image, &dets).unwrap();
        assert_eq!(sel.quadrant, QuadrantId::BottomLeft);
        assert_eq!(sel.labels.len(), 1);
        // Translated by (0, -50).
        assert_eq!(sel.labels[0].bbox, BBox::new(20.0, 20.0, 30.0, 30.0).unwrap());
        assert_eq!(sel.crop.width(), 50);
        assert_eq!(sel.crop.height(), 50);
    }

    #[test]
    fn single_detection_selects_its_quadrant() {
        let image = Raster::new(100, 100);
        let dets = vec![det(75.0, 25.0, 5.0, 0.6)];
        let sel = select_confident_region(&image, &dets).unwrap();
        assert_eq!(sel.quadrant, QuadrantId::TopRight);
        assert_eq!(sel.labels.len(), 1);
        assert_eq!(sel.labels[0].bbox, BBox::new(20.0, 20.0, 30.0, 30.0).unwrap());
    }

    #[test]
    fn no_detections_selects_nothing() {
        let image = Raster::new(100, 100);
        assert!(select_confident_region(&image, &[]).is_none());
    }

    #[test]
    fn straddling_box_is_clipped_to_crop() {
        let image = Raster::new(100, 100);
        // Center at (45, 25) -> TL, but the box reaches x = 60.
        let d = det(45.0, 25.0, 15.0, 0.9);
        let sel = select_confident_region(&image, &[d]).unwrap();
        assert_eq!(sel.quadrant, QuadrantId::TopLeft);
        assert_eq!(sel.labels[0].bbox, BBox::new(30.0, 10.0, 50.0, 40.0).unwrap());
    }

    #[test]
    fn odd_dimensions_give_remainder_to_right_bottom() {
        assert_eq!(QuadrantId::TopLeft.rect(101, 99), (0, 0, 50, 49));
        assert_eq!(QuadrantId::TopRight.rect(101, 99), (50, 0, 101, 49));
        assert_eq!(QuadrantId::BottomRight.rect(101, 99), (50, 49, 101, 99));
    }

    #[test]
    fn tie_breaks_by_fixed_priority() {
        let dets = vec![det(75.0, 75.0, 5.0, 0.8), det(75.0, 25.0, 5.0, 0.8)];
        let s = score_regions(&dets, 100, 100);
        assert_eq!(s.best(), Some(QuadrantId::TopRight));
    }
}
