//! Raw-to-grid decode transforms and their exact inverses.
//!
//! Box centers decode to `2 sigmoid(t) - 0.5` (cell-relative), box extents to
//! `(anchor / stride) * (2 sigmoid(t))^2`, and part offsets to
//! `(anchor / stride) * (4 sigmoid(t) - 2)`, all in grid units.

use super::{Anchor, RepresentationError};
use crate::geometry::BBox;

/// Largest sigmoid output distance from 0 and 1 that still keeps every decoded
/// value strictly inside its open interval in f64.
const SIGMOID_EDGE: f64 = 1e-15;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid clamped to `[1e-15, 1 - 1e-15]` so saturated inputs never reach the
/// closed bounds after scaling.
pub(crate) fn sigmoid_open(x: f64) -> f64 {
    sigmoid(x).clamp(SIGMOID_EDGE, 1.0 - SIGMOID_EDGE)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn inverse_unit(component: &str, value: f64, lower: f64, upper: f64) -> Result<f64, RepresentationError> {
    if !(value > lower && value < upper) {
        return Err(RepresentationError::Range {
            component: component.to_string(),
            value,
            lower,
            upper,
        });
    }
    Ok(logit((value - lower) / (upper - lower)))
}

pub fn decode_box(raw: [f64; 4], anchor: Anchor, stride: f64) -> BBox {
    let bw = anchor.w / stride;
    let bh = anchor.h / stride;
    BBox::grid(
        2.0 * sigmoid_open(raw[0]) - 0.5,
        2.0 * sigmoid_open(raw[1]) - 0.5,
        bw * (2.0 * sigmoid_open(raw[2])).powi(2),
        bh * (2.0 * sigmoid_open(raw[3])).powi(2),
    )
}

/// Decodes `2k` raw values into `k` cell-relative offset points.
pub fn decode_offsets(raw: &[f64], anchor: Anchor, stride: f64) -> Vec<[f64; 2]> {
    let bw = anchor.w / stride;
    let bh = anchor.h / stride;
    raw.chunks_exact(2)
        .map(|p| [bw * (4.0 * sigmoid_open(p[0]) - 2.0), bh * (4.0 * sigmoid_open(p[1]) - 2.0)])
        .collect()
}

/// Inverse of [`decode_box`] on the open domain: centers in `(-0.5, 1.5)`,
/// extent-to-anchor ratios in `(0, 4)`.
pub fn encode_box(b: &BBox, anchor: Anchor, stride: f64) -> Result<[f64; 4], RepresentationError> {
    let rw = b.w / (anchor.w / stride);
    let rh = b.h / (anchor.h / stride);
    // sqrt(r) / 2 lies in (0, 1) exactly when r lies in (0, 4)
    let check_ratio = |name: &str, r: f64| -> Result<f64, RepresentationError> {
        if !(r > 0.0 && r < 4.0) {
            return Err(RepresentationError::Range { component: name.into(), value: r, lower: 0.0, upper: 4.0 });
        }
        Ok(logit(r.sqrt() / 2.0))
    };
    Ok([
        inverse_unit("b_x", b.cx, -0.5, 1.5)?,
        inverse_unit("b_y", b.cy, -0.5, 1.5)?,
        check_ratio("b_w / anchor_w", rw)?,
        check_ratio("b_h / anchor_h", rh)?,
    ])
}

/// Inverse of [`decode_offsets`]; each component must lie strictly inside
/// `±2 * anchor / stride`.
pub fn encode_offsets(points: &[[f64; 2]], anchor: Anchor, stride: f64) -> Result<Vec<f64>, RepresentationError> {
    let bw = anchor.w / stride;
    let bh = anchor.h / stride;
    let mut out = Vec::with_capacity(points.len() * 2);
    for (i, p) in points.iter().enumerate() {
        out.push(inverse_unit(&format!("d_x[{i}]"), p[0], -2.0 * bw, 2.0 * bw)?);
        out.push(inverse_unit(&format!("d_y[{i}]"), p[1], -2.0 * bh, 2.0 * bh)?);
    }
    Ok(out)
}

/// Maps a grid-unit offset to the sigmoid-space target `(d * s / B + 2) / 4`.
/// Returns `None` when the offset is not strictly representable.
pub fn normalize_offsets(point: [f64; 2], anchor: Anchor, stride: f64) -> Option<[f64; 2]> {
    let tx = (point[0] * stride / anchor.w + 2.0) / 4.0;
    let ty = (point[1] * stride / anchor.h + 2.0) / 4.0;
    let open = |t: f64| t > 0.0 && t < 1.0;
    (open(tx) && open(ty)).then_some([tx, ty])
}
