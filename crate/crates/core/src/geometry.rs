//! Axis-aligned boxes in normalized world coordinates.

use serde::{Deserialize, Serialize};

/// Center/size box with all coordinates normalized to the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Positive size, finite, and overlapping the unit square.
    pub fn is_valid(&self) -> bool {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        finite
            && self.w > 0.0
            && self.h > 0.0
            && self.x1() < 1.0
            && self.x2() > 0.0
            && self.y1() < 1.0
            && self.y2() > 0.0
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1().max(other.x1())).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1().max(other.y1())).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}
