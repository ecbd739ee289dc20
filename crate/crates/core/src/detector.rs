//! The detector abstraction: a parameterized model exposing inference, a
//! differentiable detection loss, and indexed read/write access to its
//! parameter arrays. The adaptation machinery touches detectors only through
//! this interface, so any detector implementing it plugs in.

use ndarray::ArrayD;

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// A flat, ordered collection of real-valued parameter arrays. Two models
/// with the same architecture descriptor produce sets with identical shapes
/// and ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub arrays: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn new(arrays: Vec<ArrayD<f64>>) -> Self {
        ParamSet { arrays }
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayD::zeros(a.raw_dim()))
                .collect(),
        }
    }

    pub fn same_shapes(&self, other: &ParamSet) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Largest elementwise absolute difference across all arrays.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        assert!(self.same_shapes(other), "shape mismatch");
        let mut m: f64 = 0.0;
        for (a, b) in self.arrays.iter().zip(&other.arrays) {
            for (x, y) in a.iter().zip(b.iter()) {
                m = m.max((x - y).abs());
            }
        }
        m
    }

    /// Order-sensitive hash of the exact parameter bits. Used to assert that
    /// a model was not touched.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            acc ^= v;
            acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for a in &self.arrays {
            mix(a.len() as u64);
            for v in a.iter() {
                mix(v.to_bits());
            }
        }
        acc
    }

    /// `self = coef_self * self + coef_other * other`, elementwise.
    pub fn blend(&mut self, coef_self: f64, other: &ParamSet, coef_other: f64) {
        assert!(self.same_shapes(other), "shape mismatch");
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            a.zip_mut_with(b, |x, y| *x = coef_self * *x + coef_other * *y);
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &ParamSet) {
        assert!(self.same_shapes(other), "shape mismatch");
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            a.zip_mut_with(b, |x, y| *x += *y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// A loss value paired with its gradient with respect to every parameter
/// array (aligned with [`DetectorModel::params`] ordering).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: ParamSet,
}

/// An object detector with differentiable training loss.
///
/// `infer` is deterministic given fixed parameters; returned boxes are
/// clipped to the image and never degenerate. `detection_loss` is
/// non-negative and differentiable with respect to the parameters.
/// Detections/boxes are immutable values; a model instance is single-writer
/// (clone it for concurrent mutation).
pub trait DetectorModel: Clone {
    /// Opaque architecture descriptor. Equal descriptors guarantee parameter
    /// sets of identical shapes and ordering.
    fn architecture(&self) -> &str;

    fn num_classes(&self) -> usize;

    /// Run detection on an image.
    fn infer(&self, image: &Raster) -> Result<Vec<Detection>>;

    /// Training loss of the model on `(image, targets)` together with its
    /// parameter gradient. Errors on an empty target list.
    fn detection_loss(&self, image: &Raster, targets: &[Detection]) -> Result<LossGrad>;

    /// Snapshot of all parameter arrays.
    fn params(&self) -> ParamSet;

    /// Overwrite all parameter arrays. Shapes must match.
    fn set_params(&mut self, params: &ParamSet) -> Result<()>;
}

/// Deep, independent copy: mutating either model leaves the other
/// bit-identical.
pub fn clone_model<M: DetectorModel>(model: &M) -> M {
    model.clone()
}

/// Error helper for implementations checking architecture compatibility.
pub fn check_same_architecture<M: DetectorModel>(a: &M, b: &M) -> Result<()> {
    if a.architecture() != b.architecture() {
        return Err(Error::ArchitectureMismatch {
            left: a.architecture().to_string(),
            right: b.architecture().to_string(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn ps(vals: &[f64]) -> ParamSet {
        ParamSet::new(vec![ArrayD::from_shape_vec(
            ndarray::IxDyn(&[vals.len()]),
            vals.to_vec(),
        )
        .unwrap()])
    }

    #[test]
    fn checksum_changes_with_bits() {
        let a = ps(&[1.0, 2.0]);
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.arrays[0][[0]] = f64::from_bits(b.arrays[0][[0]].to_bits() ^ 1);
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn blend_is_convex_combination() {
        let mut a = ps(&[1.0, 0.0]);
        let b = ps(&[0.0, 1.0]);
        a.blend(0.9, &b, 0.1);
        assert!((a.arrays[0][[0]] - 0.9).abs() < 1e-15);
        assert!((a.arrays[0][[1]] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn max_abs_diff_reports_largest() {
        let a = ps(&[1.0, 2.0, 3.0]);
        let b = ps(&[1.0, 2.5, 2.9]);
        assert!((a.max_abs_diff(&b) - 0.5).abs() < 1e-15);
    }
}
