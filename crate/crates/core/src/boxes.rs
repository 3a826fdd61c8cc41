//! Axis-aligned boxes in image pixel coordinates, IoU, and the standard
//! center/size delta parameterization used by the box regressors.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn clip(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn is_inside(&self, w: f64, h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }

    /// Deterministic total order for tie-breaking.
    pub fn lex_key(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn lex_less(a: &BBox, b: &BBox) -> bool {
    a.lex_key()
        .iter()
        .zip(b.lex_key())
        .find_map(|(x, y)| {
            if *x < y {
                Some(true)
            } else if *x > y {
                Some(false)
            } else {
                None
            }
        })
        .unwrap_or(false)
}

/// Box regression encoding: offsets of the target relative to the anchor in
/// (dx, dy, dw, dh) with log-scaled sizes.
pub fn encode_box(target: &BBox, anchor: &BBox) -> [f64; 4] {
    let (tx, ty) = target.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width().max(1e-6), anchor.height().max(1e-6));
    let (tw, th) = (target.width().max(1e-6), target.height().max(1e-6));
    [
        (tx - ax) / aw,
        (ty - ay) / ah,
        (tw / aw).ln(),
        (th / ah).ln(),
    ]
}

/// Inverse of `encode_box`. Log-size deltas are clamped so an untrained head
/// cannot produce astronomically large boxes.
pub fn decode_box(delta: &[f64; 4], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width().max(1e-6), anchor.height().max(1e-6));
    let cx = ax + delta[0].clamp(-10.0, 10.0) * aw;
    let cy = ay + delta[1].clamp(-10.0, 10.0) * ah;
    let w = aw * delta[2].clamp(-6.0, 6.0).exp();
    let h = ah * delta[3].clamp(-6.0, 6.0).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}
