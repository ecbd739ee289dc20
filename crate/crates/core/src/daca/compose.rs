//! Assembly of the 2x2 composite image from four augmented copies of the
//! confident crop.

use serde::{Deserialize, Serialize};

use super::augment::{apply_augment, AugmentChain};
use super::{QuadrantId, RegionSelection};
use crate::detection::Detection;
use crate::raster::Raster;

/// The composite image, its transported labels, and the per-slot chain
/// provenance (serializable for run reproducibility).
#[derive(Debug, Clone)]
pub struct CompositePackage {
    pub image: Raster,
    /// In composite coordinates; every box sits inside its slot cell.
    pub labels: Vec<Detection>,
    pub provenance: CompositeProvenance,
}

/// Applied augmentation chains per slot, in TL, TR, BL, BR order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompositeProvenance {
    pub slots: [AugmentChain; 4],
}

/// Augment the crop once per slot and join the four results in a 2x2 grid
/// (TL, TR, BL, BR). Slot labels are the augmented crop-local boxes
/// translated by the slot offset. Returns `None` when every slot lost all
/// of its labels (skip this image).
pub fn compose(
    selection: &RegionSelection,
    chains: [AugmentChain; 4],
    min_box_area: f64,
) -> Option<CompositePackage> {
    let (ch, cw) = (selection.crop.height(), selection.crop.width());
    let mut image = Raster::new(2 * ch, 2 * cw);
    let mut labels = Vec::new();

    for (slot, chain) in QuadrantId::ALL.iter().zip(chains.iter()) {
        let mut crop = selection.crop.clone();
        let mut slot_labels = selection.labels.clone();
        for op in chain {
            let (c, l) = apply_augment(op, &crop, &slot_labels, min_box_area);
            crop = c;
            slot_labels = l;
        }
        let (row, col) = slot.grid_pos();
        let (dx, dy) = ((col * cw) as f64, (row * ch) as f64);
        image.paste(&crop, col * cw, row * ch);
        labels.extend(slot_labels.iter().map(|d| Detection {
            bbox: d.bbox.translate(dx, dy),
            ..*d
        }));
    }

    if labels.is_empty() {
        return None;
    }
    Some(CompositePackage {
        image,
        labels,
        provenance: CompositeProvenance { slots: chains },
    })
}
