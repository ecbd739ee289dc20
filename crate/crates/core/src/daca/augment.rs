//! Random augmentation ops applied to a confident crop and its labels.
//!
//! Photometric ops (color jitter, grayscale, blur) never touch geometry:
//! the label list passes through bit-identical. Geometric ops (flip, scale
//! jitter) transport boxes exactly and drop labels that become degenerate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::raster::Raster;

/// Fill color used where scale jitter shrinks the crop away from its edges.
const SCALE_PAD: [f64; 3] = [0.5, 0.5, 0.5];

/// Magnitude ranges and sampling probabilities for augmentation chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability that each op kind is included in a sampled chain.
    pub include_prob: f64,
    /// Scale jitter factor range.
    pub scale_range: (f64, f64),
    /// Color jitter factor range (brightness, contrast, saturation).
    pub color_range: (f64, f64),
    /// Gaussian blur sigma upper bound (lower bound is open at 0).
    pub blur_sigma_max: f64,
    /// Labels whose post-transform area falls below this are dropped.
    pub min_box_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            include_prob: 0.5,
            scale_range: (0.75, 1.25),
            color_range: (0.6, 1.4),
            blur_sigma_max: 3.0,
            min_box_area: 16.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let check = |ok: bool, key: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(crate::Error::InvalidConfig {
                    key: format!("augment.{key}"),
                    reason: reason.to_string(),
                })
            }
        };
        check(
            (0.0..=1.0).contains(&self.include_prob),
            "include_prob",
            "must lie in [0, 1]",
        )?;
        check(
            0.75 <= self.scale_range.0
                && self.scale_range.0 <= self.scale_range.1
                && self.scale_range.1 <= 1.25,
            "scale_range",
            "must be a sub-range of [0.75, 1.25]",
        )?;
        check(
            0.6 <= self.color_range.0
                && self.color_range.0 <= self.color_range.1
                && self.color_range.1 <= 1.4,
            "color_range",
            "must be a sub-range of [0.6, 1.4]",
        )?;
        check(
            self.blur_sigma_max > 0.0 && self.blur_sigma_max <= 3.0,
            "blur_sigma_max",
            "must lie in (0, 3]",
        )?;
        check(self.min_box_area >= 0.0, "min_box_area", "must be >= 0")?;
        Ok(())
    }
}

/// One augmentation kind with its magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentKind {
    HorizontalFlip,
    ScaleJitter {
        factor: f64,
    },
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
    Grayscale,
    GaussianBlur {
        sigma: f64,
    },
}

/// A sampled op: kind, magnitudes, and the sub-seed it was drawn under
/// (recorded for run reproducibility).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentOp {
    #[serde(flatten)]
    pub kind: AugmentKind,
    pub seed: u64,
}

/// The ops applied to one composite slot, in application order.
pub type AugmentChain = Vec<AugmentOp>;

/// Sample a chain: each of the five kinds is independently included with
/// `include_prob`, magnitudes drawn uniformly from the configured ranges.
/// Deterministic under a fixed rng state.
pub fn sample_augment_chain(rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> AugmentChain {
    let mut chain = Vec::new();
    let mut push = |kind: AugmentKind, seed: u64| chain.push(AugmentOp { kind, seed });

    // Draw in a fixed kind order so chains are reproducible.
    let seed: u64 = rng.random();
    if rng.random::<f64>() < cfg.include_prob {
        push(AugmentKind::HorizontalFlip, seed);
    }
    let seed: u64 = rng.random();
    if rng.random::<f64>() < cfg.include_prob {
        let factor = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
        push(AugmentKind::ScaleJitter { factor }, seed);
    }
    let seed: u64 = rng.random();
    if rng.random::<f64>() < cfg.include_prob {
        let (lo, hi) = cfg.color_range;
        let brightness = rng.random_range(lo..=hi);
        let contrast = rng.random_range(lo..=hi);
        let saturation = rng.random_range(lo..=hi);
        push(
            AugmentKind::ColorJitter {
                brightness,
                contrast,
                saturation,
            },
            seed,
        );
    }
    let seed: u64 = rng.random();
    if rng.random::<f64>() < cfg.include_prob {
        push(AugmentKind::Grayscale, seed);
    }
    let seed: u64 = rng.random();
    if rng.random::<f64>() < cfg.include_prob {
        // Open at zero: nudge away from an exactly-zero sigma.
        let sigma = rng.random_range(0.0..cfg.blur_sigma_max).max(1e-3);
        push(AugmentKind::GaussianBlur { sigma }, seed);
    }
    chain
}

/// Apply one op to a crop and its labels.
///
/// Photometric kinds return the labels unchanged. `HorizontalFlip` maps
/// `x -> w - x` on both edges (order-normalized). `ScaleJitter` scales about
/// the crop center, then drops labels whose center leaves the crop or whose
/// clipped area falls below `min_box_area`. Class ids and confidences are
/// never altered.
pub fn apply_augment(
    op: &AugmentOp,
    crop: &Raster,
    labels: &[Detection],
    min_box_area: f64,
) -> (Raster, Vec<Detection>) {
    let (w, h) = (crop.width() as f64, crop.height() as f64);
    match &op.kind {
        AugmentKind::HorizontalFlip => {
            let image = crop.hflip();
            let labels = labels
                .iter()
                .map(|d| Detection {
                    bbox: crate::detection::BBox {
                        x1: w - d.bbox.x2,
                        y1: d.bbox.y1,
                        x2: w - d.bbox.x1,
                        y2: d.bbox.y2,
                    },
                    ..*d
                })
                .collect();
            (image, labels)
        }
        AugmentKind::ScaleJitter { factor } => {
            let s = *factor;
            let image = crop.scale_about_center(s, SCALE_PAD);
            let labels = labels
                .iter()
                .filter_map(|d| {
                    let b = &d.bbox;
                    let scaled = crate::detection::BBox {
                        x1: s * b.x1 + w * (1.0 - s) / 2.0,
                        y1: s * b.y1 + h * (1.0 - s) / 2.0,
                        x2: s * b.x2 + w * (1.0 - s) / 2.0,
                        y2: s * b.y2 + h * (1.0 - s) / 2.0,
                    };
                    let (cx, cy) = scaled.center();
                    if cx < 0.0 || cx > w || cy < 0.0 || cy > h {
                        return None;
                    }
                    let clipped = scaled.clip(w, h)?;
                    if clipped.area() < min_box_area {
                        return None;
                    }
                    Some(Detection { bbox: clipped, ..*d })
                })
                .collect();
            (image, labels)
        }
        AugmentKind::ColorJitter {
            brightness,
            contrast,
            saturation,
        } => {
            let mean = crop.mean_luminance();
            let mut image = crop.clone();
            for y in 0..crop.height() {
                for x in 0..crop.width() {
                    let p = crop.get(y, x);
                    let lum = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                    let mut out = [0.0; 3];
                    for c in 0..3 {
                        let v = lum + saturation * (p[c] - lum);
                        let v = mean + contrast * (v - mean);
                        out[c] = (v * brightness).clamp(0.0, 1.0);
                    }
                    image.set(y, x, out);
                }
            }
            (image, labels.to_vec())
        }
        AugmentKind::Grayscale => {
            let mut image = crop.clone();
            for y in 0..crop.height() {
                for x in 0..crop.width() {
                    let lum = crop.luminance(y, x);
                    image.set(y, x, [lum, lum, lum]);
                }
            }
            (image, labels.to_vec())
        }
        AugmentKind::GaussianBlur { sigma } => (crop.gaussian_blur(*sigma), labels.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use rand_chacha::rand_core::SeedableRng;

    fn op(kind: AugmentKind) -> AugmentOp {
        AugmentOp { kind, seed: 0 }
    }

    fn det(x1: f64, y1: f64, x2: f64, y2: f64) -> Detection {
        Detection::new(BBox::new(x1, y1, x2, y2).unwrap(), 1, 0.8).unwrap()
    }

    fn checker(h: usize, w: usize) -> Raster {
        let mut r = Raster::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let v = ((x + y) % 2) as f64;
                r.set(y, x, [v, 0.3, 1.0 - v]);
            }
        }
        r
    }

    #[test]
    fn flip_maps_box_edges() {
        let crop = checker(50, 50);
        let labels = vec![det(10.0, 5.0, 20.0, 15.0)];
        let (_, out) = apply_augment(&op(AugmentKind::HorizontalFlip), &crop, &labels, 16.0);
        assert_eq!(out[0].bbox, BBox::new(30.0, 5.0, 40.0, 15.0).unwrap());
    }

    #[test]
    fn flip_twice_is_identity() {
        let crop = checker(32, 48);
        let labels = vec![det(3.0, 4.0, 17.5, 21.25)];
        let f = op(AugmentKind::HorizontalFlip);
        let (img1, lab1) = apply_augment(&f, &crop, &labels, 16.0);
        let (img2, lab2) = apply_augment(&f, &img1, &lab1, 16.0);
        assert_eq!(img2, crop);
        assert_eq!(lab2, labels);
    }

    #[test]
    fn photometric_ops_leave_labels_bit_identical() {
        let crop = checker(40, 40);
        let labels = vec![det(1.5, 2.5, 30.0, 31.0), det(5.0, 5.0, 11.0, 11.0)];
        for kind in [
            AugmentKind::Grayscale,
            AugmentKind::GaussianBlur { sigma: 2.0 },
            AugmentKind::ColorJitter {
                brightness: 1.3,
                contrast: 0.7,
                saturation: 0.6,
            },
        ] {
            let (_, out) = apply_augment(&op(kind), &crop, &labels, 16.0);
            assert_eq!(out, labels);
        }
    }

    #[test]
    fn scale_jitter_drops_small_boxes() {
        let crop = checker(64, 64);
        // 5x5 box: at factor 0.79 the area falls to ~15.6 < 16.
        let labels = vec![det(30.0, 30.0, 35.0, 35.0)];
        let (_, out) = apply_augment(
            &op(AugmentKind::ScaleJitter { factor: 0.79 }),
            &crop,
            &labels,
            16.0,
        );
        assert!(out.is_empty());
        // A larger box survives and scales about the center.
        let labels = vec![det(22.0, 22.0, 42.0, 42.0)];
        let (_, out) = apply_augment(
            &op(AugmentKind::ScaleJitter { factor: 0.8 }),
            &crop,
            &labels,
            16.0,
        );
        assert_eq!(out.len(), 1);
        assert!((out[0].bbox.x1 - (0.8 * 22.0 + 64.0 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn scale_jitter_drops_centers_leaving_crop() {
        let crop = checker(64, 64);
        // Center at (60, 60): at factor 1.25 it moves to (67, 67), outside.
        let labels = vec![det(55.0, 55.0, 64.0, 64.0)];
        let (_, out) = apply_augment(
            &op(AugmentKind::ScaleJitter { factor: 1.25 }),
            &crop,
            &labels,
            16.0,
        );
        assert!(out.is_empty());
    }

    #[test]
    fn augmentation_preserves_class_and_confidence() {
        let crop = checker(64, 64);
        let labels = vec![Detection::new(
            BBox::new(20.0, 20.0, 40.0, 40.0).unwrap(),
            2,
            0.62,
        )
        .unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let chain = sample_augment_chain(&mut rng, &AugmentConfig::default());
            let mut img = crop.clone();
            let mut labs = labels.clone();
            for o in &chain {
                let (i, l) = apply_augment(o, &img, &labs, 16.0);
                img = i;
                labs = l;
            }
            for d in labs {
                assert_eq!(d.class_id, 2);
                assert_eq!(d.confidence, 0.62);
            }
        }
    }

    #[test]
    fn chain_sampling_is_deterministic() {
        let cfg = AugmentConfig::default();
        let a = sample_augment_chain(&mut ChaCha8Rng::seed_from_u64(9), &cfg);
        let b = sample_augment_chain(&mut ChaCha8Rng::seed_from_u64(9), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn flip_frequency_close_to_half() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let mut flips = 0;
        for _ in 0..n {
            let chain = sample_augment_chain(&mut rng, &cfg);
            if chain
                .iter()
                .any(|o| matches!(o.kind, AugmentKind::HorizontalFlip))
            {
                flips += 1;
            }
        }
        let freq = flips as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "flip frequency {freq}");
    }

    #[test]
    fn extreme_magnitudes_still_yield_valid_boxes() {
        let crop = checker(64, 64);
        let labels = vec![det(10.0, 10.0, 50.0, 50.0)];
        let chain = vec![
            op(AugmentKind::HorizontalFlip),
            op(AugmentKind::ScaleJitter { factor: 1.25 }),
            op(AugmentKind::ColorJitter {
                brightness: 1.4,
                contrast: 0.6,
                saturation: 1.4,
            }),
            op(AugmentKind::Grayscale),
            op(AugmentKind::GaussianBlur { sigma: 3.0 }),
        ];
        let mut img = crop;
        let mut labs = labels;
        for o in &chain {
            let (i, l) = apply_augment(o, &img, &labs, 16.0);
            img = i;
            labs = l;
        }
        for d in &labs {
            d.bbox.validate().unwrap();
            assert!(d.bbox.within(64.0, 64.0));
        }
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn op_provenance_round_trips_through_json() {
        let chain = vec![
            op(AugmentKind::ScaleJitter { factor: 0.9 }),
            op(AugmentKind::GaussianBlur { sigma: 1.25 }),
        ];
        let text = serde_json::to_string(&chain).unwrap();
        assert!(text.contains("\"kind\":\"scale_jitter\""));
        let back: AugmentChain = serde_json::from_str(&text).unwrap();
        assert_eq!(back, chain);
    }
}
