//! The self-training adaptation loop: pseudo-label filtering, the composite
//! student loss, the teacher consistency loss, combined optimizer steps on
//! the student, and the per-epoch EMA teacher refresh.

use serde::{Deserialize, Serialize};

use crate::daca::{compose, sample_augment_chain, select_confident_region, AugmentConfig};
use crate::detection::{Detection, LabeledImage};
use crate::detector::{check_same_architecture, DetectorModel, LossGrad};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::derive_rng;
use crate::toy::SgdMomentum;

/// Adaptation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Pseudo-labels below this confidence are discarded, both for region
    /// selection and for teacher targets.
    pub selection_confidence: f64,
    /// EMA retention: `teacher = alpha * teacher + (1 - alpha) * student`.
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Train on composites of the confident region (the augment-compose
    /// branch). Off = consistency-only adaptation.
    pub enable_daca: bool,
    /// Keep the teacher branch. Off = bare self-training, which collapses.
    pub enable_teacher: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            selection_confidence: 0.5,
            alpha: 0.9,
            epochs: 12,
            learning_rate: 1e-3,
            momentum: 0.9,
            enable_daca: true,
            enable_teacher: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfig {
                key: format!("adapt.{key}"),
                reason: reason.to_string(),
            })
        };
        if !(self.selection_confidence > 0.0 && self.selection_confidence < 1.0) {
            return bad("selection_confidence", "must lie in (0, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha", "must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Exactly the detections with confidence >= threshold, order preserved.
pub fn filter_pseudo_labels(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.confidence >= threshold)
        .copied()
        .collect()
}

/// `teacher = alpha * teacher + (1 - alpha) * student`, elementwise over
/// every parameter array. Errors when the architectures differ.
pub fn ema_update<M: DetectorModel>(teacher: &mut M, student: &M, alpha: f64) -> Result<()> {
    check_same_architecture(teacher, student)?;
    let mut params = teacher.params();
    params.blend(alpha, &student.params(), 1.0 - alpha);
    teacher.set_params(&params)
}

/// Student branch: mine confident detections, select the best quadrant,
/// augment-compose, and take the detection loss on the composite. `None`
/// means the image produced nothing to train on.
pub fn student_step<M: DetectorModel>(
    student: &M,
    image: &Raster,
    selection_confidence: f64,
    augment: &AugmentConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Option<LossGrad>> {
    let dets = student.infer(image)?;
    let confident = filter_pseudo_labels(&dets, selection_confidence);
    let Some(selection) = select_confident_region(image, &confident) else {
        return Ok(None);
    };
    let chains = [
        sample_augment_chain(rng, augment),
        sample_augment_chain(rng, augment),
        sample_augment_chain(rng, augment),
        sample_augment_chain(rng, augment),
    ];
    let Some(package) = compose(&selection, chains, augment.min_box_area) else {
        return Ok(None);
    };
    student.detection_loss(&package.image, &package.labels).map(Some)
}

/// Teacher branch: the teacher's confident detections on the full image act
/// as hard targets for the student's loss. No gradients reach the teacher.
pub fn teacher_step<M: DetectorModel>(
    student: &M,
    teacher: &M,
    image: &Raster,
    selection_confidence: f64,
) -> Result<Option<LossGrad>> {
    let dets = teacher.infer(image)?;
    let targets = filter_pseudo_labels(&dets, selection_confidence);
    if targets.is_empty() {
        return Ok(None);
    }
    student.detection_loss(image, &targets).map(Some)
}

/// Loss record of a single adaptation iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationOutcome {
    pub l_s: Option<f64>,
    pub l_t: Option<f64>,
    /// Sum of the present components; `None` when both branches skipped.
    pub l_tot: Option<f64>,
}

/// One combined step: compute both branch losses, sum gradients, and apply a
/// single momentum-SGD update to the student. Teacher parameters are never
/// touched here.
pub fn total_step<M: DetectorModel>(
    student: &mut M,
    teacher: &M,
    image: &Raster,
    cfg: &AdaptConfig,
    augment: &AugmentConfig,
    optimizer: &mut SgdMomentum,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<IterationOutcome> {
    let s = if cfg.enable_daca {
        student_step(student, image, cfg.selection_confidence, augment, rng)?
    } else {
        None
    };
    let t = if cfg.enable_teacher {
        teacher_step(student, teacher, image, cfg.selection_confidence)?
    } else {
        None
    };

    let outcome = IterationOutcome {
        l_s: s.as_ref().map(|g| g.loss),
        l_t: t.as_ref().map(|g| g.loss),
        l_tot: match (&s, &t) {
            (None, None) => None,
            (a, b) => Some(
                a.as_ref().map_or(0.0, |g| g.loss) + b.as_ref().map_or(0.0, |g| g.loss),
            ),
        },
    };

    let grads = match (s, t) {
        (Some(mut gs), Some(gt)) => {
            gs.grads.add_assign(&gt.grads);
            Some(gs.grads)
        }
        (Some(gs), None) => Some(gs.grads),
        (None, Some(gt)) => Some(gt.grads),
        (None, None) => None,
    };
    if let Some(grads) = grads {
        let mut params = student.params();
        optimizer.step(&mut params, &grads);
        student.set_params(&params)?;
    }
    Ok(outcome)
}

/// One metrics-log line per iteration (plus one initial probe line).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iter: usize,
    pub l_s: Option<f64>,
    pub l_t: Option<f64>,
    pub l_tot: Option<f64>,
    /// Cumulative skipped-iteration count.
    pub skipped: usize,
    pub map_eval: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "epoch,iter,l_s,l_t,l_tot,skipped,map_eval";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.iter,
            opt(self.l_s),
            opt(self.l_t),
            opt(self.l_tot),
            self.skipped,
            opt(self.map_eval)
        )
    }

    pub fn parse_csv_line(line: &str) -> Option<MetricsRow> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return None;
        }
        let opt = |s: &str| -> Option<f64> {
            if s.is_empty() {
                None
            } else {
                s.parse().ok()
            }
        };
        Some(MetricsRow {
            epoch: parts[0].parse().ok()?,
            iter: parts[1].parse().ok()?,
            l_s: opt(parts[2]),
            l_t: opt(parts[3]),
            l_tot: opt(parts[4]),
            skipped: parts[5].parse().ok()?,
            map_eval: opt(parts[6]),
        })
    }
}

/// Per-epoch aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_l_s: Option<f64>,
    pub mean_l_t: Option<f64>,
    pub mean_l_tot: Option<f64>,
    pub iterations: usize,
    pub skipped: usize,
    pub map_eval: Option<f64>,
}

/// Extra knobs around [`adapt`].
#[derive(Debug, Clone)]
pub struct AdaptOptions<'a> {
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Labeled split used for mAP probes; probes are skipped when absent.
    pub eval_split: Option<&'a [LabeledImage]>,
    /// Iterations between mAP probes (0 disables mid-epoch probes; epoch-end
    /// probes still run when an eval split is provided).
    pub eval_every: usize,
}

impl Default for AdaptOptions<'_> {
    fn default() -> Self {
        AdaptOptions {
            augment: AugmentConfig::default(),
            seed: 0,
            eval_split: None,
            eval_every: 5,
        }
    }
}

/// Observer hook for epoch boundaries (checkpointing etc.).
pub trait AdaptObserver<M: DetectorModel> {
    fn on_epoch_end(
        &mut self,
        _epoch: usize,
        _student: &M,
        _teacher: &M,
        _optimizer: &SgdMomentum,
        _stats: &EpochStats,
    ) -> Result<()> {
        Ok(())
    }
}

impl<M: DetectorModel> AdaptObserver<M> for () {}

/// Everything an adaptation run produces.
#[derive(Debug, Clone)]
pub struct AdaptOutcome<M> {
    pub student: M,
    pub teacher: M,
    pub rows: Vec<MetricsRow>,
    pub epochs: Vec<EpochStats>,
    /// Final optimizer state, for resumable checkpoints.
    pub optimizer: SgdMomentum,
}

/// Run the full adaptation schedule (see [`adapt_resume`] for the resumable
/// form). Both models must be pretrained on the source domain; the target
/// rasters are unlabeled.
pub fn adapt<M: DetectorModel>(
    student: M,
    teacher: M,
    target: &[Raster],
    cfg: &AdaptConfig,
    opts: &AdaptOptions,
    observer: &mut impl AdaptObserver<M>,
) -> Result<AdaptOutcome<M>> {
    let optimizer = SgdMomentum::new(cfg.learning_rate, cfg.momentum);
    adapt_resume(student, teacher, optimizer, 0, target, cfg, opts, observer)
}

/// Continue an adaptation run from `start_epoch` with a restored optimizer.
/// Seed streams are derived per (epoch, iteration), so a resumed run emits
/// exactly the rows an uninterrupted run would have produced.
#[allow(clippy::too_many_arguments)]
pub fn adapt_resume<M: DetectorModel>(
    mut student: M,
    mut teacher: M,
    mut optimizer: SgdMomentum,
    start_epoch: usize,
    target: &[Raster],
    cfg: &AdaptConfig,
    opts: &AdaptOptions,
    observer: &mut impl AdaptObserver<M>,
) -> Result<AdaptOutcome<M>> {
    cfg.validate()?;
    opts.augment.validate()?;
    check_same_architecture(&student, &teacher)?;
    if target.is_empty() {
        return Err(Error::InvalidConfig {
            key: "target".into(),
            reason: "adaptation needs at least one target image".into(),
        });
    }

    let probe = |model: &M| -> Result<Option<f64>> {
        match opts.eval_split {
            Some(split) => Ok(Some(crate::eval::evaluate(model, split)?.map)),
            None => Ok(None),
        }
    };

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut epochs: Vec<EpochStats> = Vec::new();
    let mut skipped_total = 0usize;
    let mut global_iter = start_epoch * target.len();

    if start_epoch == 0 {
        if let Some(map) = probe(&student)? {
            rows.push(MetricsRow {
                epoch: 0,
                iter: 0,
                l_s: None,
                l_t: None,
                l_tot: None,
                skipped: 0,
                map_eval: Some(map),
            });
        }
    }

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..target.len()).collect();
        let mut shuffle_rng = derive_rng(opts.seed, "adapt-shuffle", &[epoch as u64]);
        crate::toy::shuffle(&mut order, &mut shuffle_rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut counts = (0usize, 0usize, 0usize);
        let mut epoch_skipped = 0usize;

        for (pos, &idx) in order.iter().enumerate() {
            let mut iter_rng = derive_rng(opts.seed, "adapt-aug", &[epoch as u64, pos as u64]);
            let outcome = total_step(
                &mut student,
                &teacher,
                &target[idx],
                cfg,
                &opts.augment,
                &mut optimizer,
                &mut iter_rng,
            )?;
            global_iter += 1;

            if let Some(l) = outcome.l_tot {
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        iteration: global_iter,
                    });
                }
            } else {
                skipped_total += 1;
                epoch_skipped += 1;
            }
            if let Some(v) = outcome.l_s {
                sums.0 += v;
                counts.0 += 1;
            }
            if let Some(v) = outcome.l_t {
                sums.1 += v;
                counts.1 += 1;
            }
            if let Some(v) = outcome.l_tot {
                sums.2 += v;
                counts.2 += 1;
            }

            let map_eval = if opts.eval_every > 0 && global_iter % opts.eval_every == 0 {
                probe(&student)?
            } else {
                None
            };
            rows.push(MetricsRow {
                epoch: epoch + 1,
                iter: global_iter,
                l_s: outcome.l_s,
                l_t: outcome.l_t,
                l_tot: outcome.l_tot,
                skipped: skipped_total,
                map_eval,
            });
        }

        // Teacher refresh happens once per epoch, after the iteration loop.
        if cfg.enable_teacher {
            ema_update(&mut teacher, &student, cfg.alpha)?;
        }

        let mean = |sum: f64, count: usize| {
            if count > 0 {
                Some(sum / count as f64)
            } else {
                None
            }
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_l_s: mean(sums.0, counts.0),
            mean_l_t: mean(sums.1, counts.1),
            mean_l_tot: mean(sums.2, counts.2),
            iterations: order.len(),
            skipped: epoch_skipped,
            map_eval: probe(&student)?,
        };
        observer.on_epoch_end(epoch + 1, &student, &teacher, &optimizer, &stats)?;
        epochs.push(stats);
    }

    Ok(AdaptOutcome {
        student,
        teacher,
        rows,
        epochs,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use crate::toy::{ToyDetector, ToyDetectorConfig};

    fn det(conf: f64) -> Detection {
        Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), 0, conf).unwrap()
    }

    #[test]
    fn filtering_keeps_order_and_threshold() {
        let dets = vec![det(0.4), det(0.6), det(0.5), det(0.9)];
        let out = filter_pseudo_labels(&dets, 0.5);
        let confs: Vec<f64> = out.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.6, 0.5, 0.9]);
    }

    #[test]
    fn filtering_is_subsequence() {
        let dets: Vec<Detection> = (0..30)
            .map(|i| det((i as f64 * 0.7).fract()))
            .collect();
        let out = filter_pseudo_labels(&dets, 0.3);
        let mut cursor = 0usize;
        for d in &out {
            assert!(d.confidence >= 0.3);
            // Each output item appears later in the input than the previous.
            while cursor < dets.len() && dets[cursor] != *d {
                cursor += 1;
            }
            assert!(cursor < dets.len());
            cursor += 1;
        }
    }

    fn tiny_detector(seed: u64) -> ToyDetector {
        ToyDetector::new(
            ToyDetectorConfig {
                input_size: 32,
                channels: [4, 6, 8, 10],
                num_classes: 3,
                ..ToyDetectorConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn ema_scalar_case() {
        let student = tiny_detector(1);
        let mut teacher = tiny_detector(2);
        // tea = 1.0, stu = 0.0 everywhere, alpha 0.9 -> 0.9.
        let mut p = teacher.params();
        for a in &mut p.arrays {
            a.fill(1.0);
        }
        teacher.set_params(&p).unwrap();
        let mut s = student.params();
        for a in &mut s.arrays {
            a.fill(0.0);
        }
        let mut student = student;
        student.set_params(&s).unwrap();
        ema_update(&mut teacher, &student, 0.9).unwrap();
        for a in &teacher.params().arrays {
            for v in a.iter() {
                assert!((v - 0.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_alpha_one_is_identity() {
        let student = tiny_detector(1);
        let mut teacher = tiny_detector(2);
        let before = teacher.params().checksum();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.params().checksum(), before);
    }

    #[test]
    fn ema_matches_convex_combination() {
        let student = tiny_detector(3);
        for alpha in [0.3, 0.5, 0.9, 0.95, 0.99, 1.0] {
            let mut teacher = tiny_detector(4);
            let old = teacher.params();
            ema_update(&mut teacher, &student, alpha).unwrap();
            let mut expect = old.clone();
            expect.blend(alpha, &student.params(), 1.0 - alpha);
            assert!(teacher.params().max_abs_diff(&expect) < 1e-6);
        }
    }

    #[test]
    fn arithmetic_of_total_loss() {
        // l_s = 1.2, l_t = 0.8 -> l_tot = 2.0 (unit weights).
        let outcome = IterationOutcome {
            l_s: Some(1.2),
            l_t: Some(0.8),
            l_tot: Some(1.2 + 0.8),
        };
        assert_eq!(outcome.l_tot, Some(2.0));
    }

    #[test]
    fn metrics_row_round_trips() {
        let row = MetricsRow {
            epoch: 3,
            iter: 1205,
            l_s: Some(0.125),
            l_t: None,
            l_tot: Some(0.125),
            skipped: 17,
            map_eval: Some(5.0 / 6.0),
        };
        let line = row.to_csv();
        assert_eq!(MetricsRow::parse_csv_line(&line), Some(row));
    }
}
