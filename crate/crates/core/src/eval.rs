//! Detection evaluation: greedy IoU matching, per-class AP at IoU 0.5 with
//! all-point interpolation, and mAP over the classes present in the ground
//! truth.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detection::{iou, Detection, LabeledImage};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// One scored detection after matching: confidence plus its TP/FP flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchFlag {
    pub confidence: f64,
    pub is_tp: bool,
}

/// Greedy single-image, single-class matching: detections in descending
/// confidence order each claim the unmatched ground truth of highest
/// IoU >= `iou_thr`; everything else is a false positive. A ground truth
/// matches at most once. Returns flags in descending-confidence order.
pub fn match_detections(preds: &[Detection], gts: &[Detection], iou_thr: f64) -> Vec<MatchFlag> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // Stable order for equal confidences keeps results deterministic.
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut gt_taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let v = iou(&preds[pi].bbox, &gt.bbox);
            if v >= iou_thr {
                match best {
                    Some((_, bv)) if v <= bv => {}
                    _ => best = Some((gi, v)),
                }
            }
        }
        let is_tp = if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            true
        } else {
            false
        };
        flags.push(MatchFlag {
            confidence: preds[pi].confidence,
            is_tp,
        });
    }
    flags
}

/// Area under the precision envelope over recall (all-point interpolation).
/// `flags` must be sorted by descending confidence. AP is 0 when there are
/// ground truths but no true positive; callers skip classes with `n_gt = 0`.
pub fn average_precision(flags: &[MatchFlag], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(flags.len()); // (recall, precision)
    for (i, f) in flags.iter().enumerate() {
        if f.is_tp {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // Precision envelope: running max from the right.
    let mut best = 0.0;
    for p in points.iter_mut().rev() {
        best = f64::max(best, p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// Per-class outcome counts and AP.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassEval {
    pub class_id: usize,
    pub ap: f64,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// (recall, precision) at each detection rank.
    pub pr_curve: Vec<(f64, f64)>,
}

/// Evaluation over a labeled dataset: per-class AP and their mean over the
/// classes present in the ground truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalResult {
    pub map: f64,
    pub classes: Vec<ClassEval>,
}

impl EvalResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// PR curves as CSV rows `class,rank,recall,precision`.
    pub fn write_pr_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let werr = |e| Error::io("writing PR csv", e);
        writeln!(w, "class,rank,recall,precision").map_err(werr)?;
        for c in &self.classes {
            for (rank, (r, p)) in c.pr_curve.iter().enumerate() {
                writeln!(w, "{},{},{:.6},{:.6}", c.class_id, rank + 1, r, p).map_err(werr)?;
            }
        }
        Ok(())
    }
}

/// Evaluate pre-computed predictions against ground truth.
pub fn evaluate_detections(
    preds_per_image: &[Vec<Detection>],
    dataset: &[LabeledImage],
    iou_thr: f64,
) -> EvalResult {
    assert_eq!(preds_per_image.len(), dataset.len());

    let mut class_ids: BTreeSet<usize> = BTreeSet::new();
    for img in dataset {
        for d in &img.labels {
            class_ids.insert(d.class_id);
        }
    }

    let mut classes = Vec::new();
    for &class_id in &class_ids {
        let mut flags: Vec<MatchFlag> = Vec::new();
        let mut n_gt = 0usize;
        for (preds, img) in preds_per_image.iter().zip(dataset) {
            let p: Vec<Detection> = preds
                .iter()
                .filter(|d| d.class_id == class_id)
                .copied()
                .collect();
            let g: Vec<Detection> = img
                .labels
                .iter()
                .filter(|d| d.class_id == class_id)
                .copied()
                .collect();
            n_gt += g.len();
            flags.extend(match_detections(&p, &g, iou_thr));
        }
        flags.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        let ap = average_precision(&flags, n_gt);
        let tp = flags.iter().filter(|f| f.is_tp).count();
        let mut cum_tp = 0usize;
        let pr_curve = flags
            .iter()
            .enumerate()
            .map(|(i, f)| {
                if f.is_tp {
                    cum_tp += 1;
                }
                (
                    if n_gt > 0 {
                        cum_tp as f64 / n_gt as f64
                    } else {
                        0.0
                    },
                    cum_tp as f64 / (i + 1) as f64,
                )
            })
            .collect();
        classes.push(ClassEval {
            class_id,
            ap,
            n_gt,
            tp,
            fp: flags.len() - tp,
            fn_: n_gt - tp,
            pr_curve,
        });
    }

    let present: Vec<&ClassEval> = classes.iter().filter(|c| c.n_gt > 0).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|c| c.ap).sum::<f64>() / present.len() as f64
    };
    EvalResult { map, classes }
}

/// Run the model over the dataset and evaluate at IoU 0.5.
pub fn evaluate<M: DetectorModel>(model: &M, dataset: &[LabeledImage]) -> Result<EvalResult> {
    let mut preds = Vec::with_capacity(dataset.len());
    for img in dataset {
        preds.push(model.infer(&img.image)?);
    }
    Ok(evaluate_detections(&preds, dataset, DEFAULT_IOU_THRESHOLD))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, conf: f64) -> Detection {
        Detection::new(BBox::new(x1, y1, x2, y2).unwrap(), 0, conf).unwrap()
    }

    #[test]
    fn perfect_single_match_is_tp() {
        let gt = vec![det(0.0, 0.0, 10.0, 10.0, 1.0)];
        let pred = vec![det(0.0, 0.0, 10.0, 10.0, 0.9)];
        let flags = match_detections(&pred, &gt, 0.5);
        assert_eq!(flags, vec![MatchFlag { confidence: 0.9, is_tp: true }]);
    }

    #[test]
    fn one_gt_two_preds_keeps_highest_confidence() {
        let gt = vec![det(0.0, 0.0, 10.0, 10.0, 1.0)];
        let preds = vec![
            det(0.5, 0.5, 10.0, 10.0, 0.8),
            det(0.0, 0.0, 10.0, 10.5, 0.9),
        ];
        let flags = match_detections(&preds, &gt, 0.5);
        assert_eq!(flags[0].confidence, 0.9);
        assert!(flags[0].is_tp);
        assert!(!flags[1].is_tp);
    }

    #[test]
    fn pred_overlapping_two_gts_takes_higher_iou() {
        // One prediction overlapping both ground truths (IoUs ~0.67 / ~0.54):
        // it must claim the higher-IoU one.
        let gts = vec![det(0.0, 2.0, 10.0, 12.0, 1.0), det(0.0, 3.0, 10.0, 13.0, 1.0)];
        let pred_box = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let i0 = iou(&pred_box.bbox, &gts[0].bbox);
        let i1 = iou(&pred_box.bbox, &gts[1].bbox);
        assert!(i0 > 0.5 && i1 > 0.5 && i0 > i1);
        let flags = match_detections(&[pred_box], &gts, 0.5);
        assert!(flags[0].is_tp);
    }

    #[test]
    fn ap_single_tp_is_one() {
        let flags = vec![MatchFlag { confidence: 0.9, is_tp: true }];
        assert_eq!(average_precision(&flags, 1), 1.0);
    }

    #[test]
    fn ap_single_fp_is_zero() {
        let flags = vec![MatchFlag { confidence: 0.9, is_tp: false }];
        assert_eq!(average_precision(&flags, 1), 0.0);
    }

    #[test]
    fn ap_hand_case_five_sixths() {
        // [TP, FP, TP] by descending confidence over 2 ground truths:
        // envelope gives 1.0 on the first recall half and 2/3 on the second.
        let flags = vec![
            MatchFlag { confidence: 0.9, is_tp: true },
            MatchFlag { confidence: 0.8, is_tp: false },
            MatchFlag { confidence: 0.7, is_tp: true },
        ];
        let ap = average_precision(&flags, 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_perfect_detector_scores_one() {
        use crate::raster::Raster;
        let mk = |boxes: &[(f64, f64, f64, f64, usize)]| LabeledImage {
            image: Raster::new(32, 32),
            labels: boxes
                .iter()
                .map(|&(a, b, c, d, cls)| {
                    Detection::new(BBox::new(a, b, c, d).unwrap(), cls, 1.0).unwrap()
                })
                .collect(),
        };
        let data = vec![
            mk(&[(0.0, 0.0, 8.0, 8.0, 0), (10.0, 10.0, 20.0, 20.0, 1)]),
            mk(&[(4.0, 4.0, 12.0, 12.0, 1)]),
        ];
        let preds: Vec<Vec<Detection>> = data.iter().map(|d| d.labels.clone()).collect();
        let res = evaluate_detections(&preds, &data, 0.5);
        assert_eq!(res.map, 1.0);
        // Empty predictions score zero.
        let empty: Vec<Vec<Detection>> = vec![vec![], vec![]];
        let res = evaluate_detections(&empty, &data, 0.5);
        assert_eq!(res.map, 0.0);
        assert!(res.classes.iter().all(|c| c.tp == 0 && c.fn_ == c.n_gt));
    }

    #[test]
    fn eval_result_json_and_pr_csv() {
        use crate::raster::Raster;
        let data = vec![LabeledImage {
            image: Raster::new(16, 16),
            labels: vec![det(0.0, 0.0, 8.0, 8.0, 1.0)],
        }];
        let preds = vec![vec![det(0.0, 0.0, 8.0, 8.0, 0.7)]];
        let res = evaluate_detections(&preds, &data, 0.5);
        let json = res.to_json().unwrap();
        assert!(json.contains("\"map\": 1.0"));
        let mut csv = Vec::new();
        res.write_pr_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("class,rank,recall,precision"));
        assert!(text.contains("0,1,1.000000,1.000000"));
    }
}
