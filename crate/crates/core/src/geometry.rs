//! Axis-aligned boxes and the GIoU family of overlap measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in image pixels: left edge, top edge, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Validating constructor; width and height must be positive and every
    /// coordinate finite.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in ({x}, {y}, {w}, {h})")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("non-positive size {w}x{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    // Area from the corner coordinates, consistent with the intersection and
    // hull arithmetic so identical boxes give exactly IoU 1.
    fn corner_area(&self) -> f64 {
        (self.right() - self.x) * (self.bottom() - self.y)
    }

    fn intersection(&self, other: &Self) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    fn hull_area(&self, other: &Self) -> f64 {
        let w = self.right().max(other.right()) - self.x.min(other.x);
        let h = self.bottom().max(other.bottom()) - self.y.min(other.y);
        w * h
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    inter / (a.corner_area() + b.corner_area() - inter)
}

/// Generalized IoU: IoU minus the share of the enclosing box not covered by
/// the union. In `(-1, 1]`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.corner_area() + b.corner_area() - inter;
    let hull = a.hull_area(b);
    inter / union - (hull - union) / hull
}

/// `(1 - giou) / 2`, in `[0, 1)`.
pub fn giou_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (1.0 - giou(a, b)) / 2.0
}
