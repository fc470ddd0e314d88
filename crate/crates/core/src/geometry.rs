//! Axis-aligned box arithmetic: IoU, complete IoU and the part-in-body
//! containment ratio.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    #[default]
    ImagePixels,
    GridUnits,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("frame mismatch: {0:?} vs {1:?}")]
    FrameMismatch(Frame, Frame),
    #[error("degenerate target box (w = {w}, h = {h})")]
    DegenerateTarget { w: f64, h: f64 },
}

/// Center-form box. Corner form is derived on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub frame: Frame,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, frame: Frame) -> Self {
        debug_assert!(w >= 0.0 && h >= 0.0, "negative box extent");
        Self { cx, cy, w, h, frame }
    }

    pub fn pixels(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx, cy, w, h, Frame::ImagePixels)
    }

    pub fn grid(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx, cy, w, h, Frame::GridUnits)
    }

    pub fn from_array(v: [f64; 4], frame: Frame) -> Self {
        Self::new(v[0], v[1], v[2], v[3], frame)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> [f64; 2] {
        [self.cx, self.cy]
    }

    /// Applies `p -> p * scale + shift` to the box geometry.
    pub fn affine(&self, scale: f64, shift: [f64; 2]) -> Self {
        Self {
            cx: self.cx * scale + shift[0],
            cy: self.cy * scale + shift[1],
            w: self.w * scale,
            h: self.h * scale,
            frame: self.frame,
        }
    }

    pub fn iou(&self, other: &BBox) -> Result<f64, GeometryError> {
        iou(self, other)
    }

    pub(crate) fn same_frame(&self, other: &BBox) -> Result<(), GeometryError> {
        if self.frame == other.frame {
            Ok(())
        } else {
            Err(GeometryError::FrameMismatch(self.frame, other.frame))
        }
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// IoU without the frame check, for hot loops where frames are known to agree.
pub(crate) fn iou_raw(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    a.same_frame(b)?;
    Ok(iou_raw(a, b))
}

pub(crate) fn ciou_raw(pred: &BBox, target: &BBox) -> f64 {
    let iou = iou_raw(pred, target);
    let [px1, py1, px2, py2] = pred.corners();
    let [tx1, ty1, tx2, ty2] = target.corners();
    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let c2 = cw * cw + ch * ch;
    let rho2 = (pred.cx - target.cx).powi(2) + (pred.cy - target.cy).powi(2);
    // atan2 keeps a zero-area prediction finite
    let v = (4.0 / (PI * PI)) * (target.w.atan2(target.h) - pred.w.atan2(pred.h)).powi(2);
    let denom = (1.0 - iou) + v;
    let alpha = if denom > 0.0 { v / denom } else { 0.0 };
    let dist = if c2 > 0.0 { rho2 / c2 } else { 0.0 };
    iou - dist - alpha * v
}

/// Complete IoU: IoU penalized by normalized center distance and aspect mismatch.
pub fn ciou(pred: &BBox, target: &BBox) -> Result<f64, GeometryError> {
    pred.same_frame(target)?;
    if !(target.w > 0.0 && target.h > 0.0) {
        return Err(GeometryError::DegenerateTarget { w: target.w, h: target.h });
    }
    Ok(ciou_raw(pred, target))
}

pub(crate) fn inner_overlap_raw(part: &BBox, body: &BBox) -> f64 {
    let area = part.area();
    if area <= 0.0 {
        0.0
    } else {
        intersection(part, body) / area
    }
}

/// Fraction of the part box covered by the body box.
pub fn inner_overlap(part: &BBox, body: &BBox) -> Result<f64, GeometryError> {
    part.same_frame(body)?;
    Ok(inner_overlap_raw(part, body))
}
