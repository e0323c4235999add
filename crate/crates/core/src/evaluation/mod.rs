//! Cue localization, remove-and-classify and weakly-supervised localization
//! protocols, and the annotation types they consume.

pub mod annotations;
pub mod cueloc;
pub mod pxap;
pub mod rac;
pub mod report;
pub mod taxonomy;
pub mod wsol;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use annotations::{read_annotations, write_annotations, Annotations};
pub use cueloc::{build_gt_cue_mask, differing_parts, mpxap_cue_localization};
pub use pxap::pxap;
pub use rac::{blur_perturb, remove_and_classify, RacConfig};
pub use report::MetricReport;
pub use taxonomy::{superset_from_taxonomy, Taxonomy};
pub use wsol::{boxes_from_mask, max_box_acc, pxap_wsol};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub part: usize,
    /// Column, in pixel units.
    pub x: f64,
    /// Row, in pixel units.
    pub y: f64,
    pub visible: bool,
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Argument(format!("degenerate box ({x0},{y0},{x1},{y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    /// Image path relative to the dataset root.
    pub path: String,
    /// `[1, ch, H0, W0]`.
    pub image: Tensor,
    pub label: usize,
    pub keypoints: Vec<Keypoint>,
    pub gt_boxes: Vec<BBox>,
    /// Binary `[H0, W0]` foreground mask.
    pub gt_mask: Option<Tensor>,
}

impl AnnotatedSample {
    /// `(H0, W0)`.
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[2], s[3])
    }
}

/// Per-class attribute sets and the part each attribute belongs to.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassAttributes {
    pub sets: BTreeMap<usize, BTreeSet<usize>>,
    pub attr_part: BTreeMap<usize, usize>,
}

impl ClassAttributes {
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.sets.keys().copied()
    }

    pub fn part_of(&self, attr: usize) -> Result<usize> {
        self.attr_part
            .get(&attr)
            .copied()
            .ok_or_else(|| Error::Argument(format!("attribute {attr} has no part")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_hand_cases() {
        let a = BBox::new(0, 0, 10, 10).unwrap();
        let b = BBox::new(5, 0, 15, 10).unwrap();
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(10, 10, 12, 12).unwrap()), 0.0);
        assert!(BBox::new(3, 0, 3, 4).is_err());
    }
}
