//! The extended detection representation: part schema, grid geometry,
//! raw prediction tensors, the box/offset codec and target assignment.

mod annotation;
mod assign;
mod codec;

pub use annotation::{BodyRecord, Dataset, ImageAnnotation, OrphanPart, PartRecord, SchemaDecl};
pub use assign::{
    assign_targets, select_cells, GtObject, ObjectKind, TargetAssignment, TargetSet, ANCHOR_RATIO_LIMIT,
};
pub use codec::{
    decode_box, decode_offsets, encode_box, encode_offsets, logit, normalize_offsets, sigmoid,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepresentationError {
    #[error("{component} = {value} is outside the open interval ({lower}, {upper})")]
    Range {
        component: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("invalid part schema: {0}")]
    Schema(String),
    #[error("invalid grid spec: {0}")]
    GridSpec(String),
    #[error("invalid annotation for image {image}: {reason}")]
    Annotation { image: String, reason: String },
    #[error("grid set does not match spec: {0}")]
    Shape(String),
}

/// Number and names of part slots attached to every body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSchema {
    pub k: usize,
    pub part_names: Vec<String>,
    #[serde(default = "default_true")]
    pub visibility_required: bool,
}

fn default_true() -> bool {
    true
}

impl PartSchema {
    pub fn new(part_names: &[&str]) -> Result<Self, RepresentationError> {
        let schema = Self {
            k: part_names.len(),
            part_names: part_names.iter().map(|s| s.to_string()).collect(),
            visibility_required: true,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn faces() -> Self {
        Self::new(&["face"]).unwrap()
    }

    pub fn hands() -> Self {
        Self::new(&["left-hand", "right-hand"]).unwrap()
    }

    pub fn validate(&self) -> Result<(), RepresentationError> {
        if self.k == 0 {
            return Err(RepresentationError::Schema("k must be at least 1".into()));
        }
        if self.part_names.len() != self.k {
            return Err(RepresentationError::Schema(format!(
                "{} part names for k = {}",
                self.part_names.len(),
                self.k
            )));
        }
        Ok(())
    }

    /// Body class plus one class per part slot.
    pub fn num_classes(&self) -> usize {
        self.k + 1
    }

    /// `A_o = 3k + 6`
    pub fn channels(&self) -> usize {
        3 * self.k + 6
    }

    pub fn class_names(&self) -> Vec<String> {
        std::iter::once("body".to_string())
            .chain(self.part_names.iter().cloned())
            .collect()
    }
}

/// Channel positions inside one anchor slot: objectness, box (4), classes
/// (k + 1), offsets (2k).
pub mod channel {
    pub const OBJ: usize = 0;
    pub const BOX: usize = 1;
    pub const CLS: usize = 5;

    pub fn offsets(k: usize) -> usize {
        CLS + k + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub const fn new(w: f64, h: f64) -> Self {
        Self { w, h }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLevel {
    pub stride: u32,
    pub anchors: Vec<Anchor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_w: u32,
    pub image_h: u32,
    pub levels: Vec<GridLevel>,
}

pub const DEFAULT_STRIDES: [u32; 4] = [8, 16, 32, 64];

/// Anchors used when a configuration does not list any. Stride 64 reuses the
/// stride-32 set scaled by 1.8.
pub fn default_anchors(stride: u32) -> Vec<Anchor> {
    const BASE: [[(f64, f64); 3]; 3] = [
        [(12.0, 16.0), (19.0, 36.0), (40.0, 28.0)],
        [(36.0, 75.0), (76.0, 55.0), (72.0, 146.0)],
        [(142.0, 110.0), (192.0, 243.0), (459.0, 401.0)],
    ];
    let (set, scale) = match stride {
        8 => (BASE[0], 1.0),
        16 => (BASE[1], 1.0),
        32 => (BASE[2], 1.0),
        64 => (BASE[2], 1.8),
        // non-standard strides: scale the nearest set by stride ratio
        s => (BASE[2], s as f64 / 32.0),
    };
    set.iter().map(|&(w, h)| Anchor::new(w * scale, h * scale)).collect()
}

impl GridSpec {
    pub fn with_default_anchors(image_w: u32, image_h: u32, strides: &[u32]) -> Result<Self, RepresentationError> {
        let spec = Self {
            image_w,
            image_h,
            levels: strides
                .iter()
                .map(|&stride| GridLevel { stride, anchors: default_anchors(stride) })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RepresentationError> {
        let err = |m: String| Err(RepresentationError::GridSpec(m));
        if self.levels.is_empty() {
            return err("at least one stride is required".into());
        }
        for pair in self.levels.windows(2) {
            if pair[0].stride >= pair[1].stride {
                return err("strides must be strictly increasing".into());
            }
        }
        let largest = self.levels.last().unwrap().stride;
        if largest == 0 || self.image_w == 0 || self.image_h == 0 {
            return err("image size and strides must be positive".into());
        }
        if self.image_w % largest != 0 || self.image_h % largest != 0 {
            return err(format!(
                "image {}x{} is not divisible by the largest stride {largest}",
                self.image_w, self.image_h
            ));
        }
        for level in &self.levels {
            if level.anchors.is_empty() {
                return err(format!("stride {} has no anchors", level.stride));
            }
            if level.anchors.iter().any(|a| !(a.w > 0.0 && a.h > 0.0)) {
                return err(format!("stride {} has a non-positive anchor", level.stride));
            }
        }
        Ok(())
    }

    /// `(columns, rows)` of the grid at `level`.
    pub fn cells(&self, level: usize) -> (usize, usize) {
        let s = self.levels[level].stride;
        ((self.image_w / s) as usize, (self.image_h / s) as usize)
    }

    pub fn total_slots(&self) -> usize {
        (0..self.levels.len())
            .map(|l| {
                let (w, h) = self.cells(l);
                w * h * self.levels[l].anchors.len()
            })
            .sum()
    }
}

/// Location of one raw value inside a [`RawGridSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridIndex {
    pub level: usize,
    pub anchor: usize,
    pub channel: usize,
    pub y: usize,
    pub x: usize,
}

/// One anchor-cell position (all channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotIndex {
    pub level: usize,
    pub anchor: usize,
    pub y: usize,
    pub x: usize,
}

impl SlotIndex {
    pub fn channel(self, channel: usize) -> GridIndex {
        GridIndex { level: self.level, anchor: self.anchor, channel, y: self.y, x: self.x }
    }
}

/// Dense raw (pre-activation) tensor for one stride, laid out `[anchor][channel][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub stride: u32,
    pub anchors: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RawGrid {
    pub fn filled(stride: u32, anchors: usize, channels: usize, h: usize, w: usize, value: f64) -> Self {
        Self { stride, anchors, channels, h, w, data: vec![value; anchors * channels * h * w] }
    }

    #[inline]
    pub fn offset(&self, anchor: usize, channel: usize, y: usize, x: usize) -> usize {
        ((anchor * self.channels + channel) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, anchor: usize, channel: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(anchor, channel, y, x)]
    }

    #[inline]
    pub fn set(&mut self, anchor: usize, channel: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(anchor, channel, y, x);
        self.data[i] = value;
    }

    /// All channel values of one anchor-cell slot.
    pub fn slot(&self, anchor: usize, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(anchor, c, y, x)).collect()
    }

    pub fn num_slots(&self) -> usize {
        self.anchors * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawGridSet {
    pub grids: Vec<RawGrid>,
}

impl RawGridSet {
    /// Grid set shaped for `spec`/`schema` with every channel set to `value`.
    pub fn filled(spec: &GridSpec, schema: &PartSchema, value: f64) -> Self {
        let grids = spec
            .levels
            .iter()
            .enumerate()
            .map(|(l, level)| {
                let (w, h) = spec.cells(l);
                RawGrid::filled(level.stride, level.anchors.len(), schema.channels(), h, w, value)
            })
            .collect();
        Self { grids }
    }

    /// Zero everywhere except objectness, which is set to `objectness`.
    pub fn with_objectness(spec: &GridSpec, schema: &PartSchema, objectness: f64) -> Self {
        let mut set = Self::filled(spec, schema, 0.0);
        for g in &mut set.grids {
            for a in 0..g.anchors {
                for y in 0..g.h {
                    for x in 0..g.w {
                        g.set(a, channel::OBJ, y, x, objectness);
                    }
                }
            }
        }
        set
    }

    pub fn get(&self, i: GridIndex) -> f64 {
        self.grids[i.level].get(i.anchor, i.channel, i.y, i.x)
    }

    pub fn set(&mut self, i: GridIndex, value: f64) {
        self.grids[i.level].set(i.anchor, i.channel, i.y, i.x, value)
    }

    pub fn check_matches(&self, spec: &GridSpec, schema: &PartSchema) -> Result<(), RepresentationError> {
        if self.grids.len() != spec.levels.len() {
            return Err(RepresentationError::Shape(format!(
                "{} grids for {} strides",
                self.grids.len(),
                spec.levels.len()
            )));
        }
        for (l, (g, level)) in self.grids.iter().zip(&spec.levels).enumerate() {
            let (w, h) = spec.cells(l);
            if g.stride != level.stride
                || g.anchors != level.anchors.len()
                || g.channels != schema.channels()
                || g.h != h
                || g.w != w
                || g.data.len() != g.anchors * g.channels * g.h * g.w
            {
                return Err(RepresentationError::Shape(format!(
                    "grid {l}: got stride {} shape [{}, {}, {}, {}], expected stride {} shape [{}, {}, {h}, {w}]",
                    g.stride,
                    g.anchors,
                    g.channels,
                    g.h,
                    g.w,
                    level.stride,
                    level.anchors.len(),
                    schema.channels()
                )));
            }
        }
        Ok(())
    }

    /// Visits every slot in `(level, anchor, y, x)` order.
    pub fn slots(&self) -> impl Iterator<Item = SlotIndex> + '_ {
        self.grids.iter().enumerate().flat_map(|(level, g)| {
            (0..g.anchors).flat_map(move |anchor| {
                (0..g.h).flat_map(move |y| (0..g.w).map(move |x| SlotIndex { level, anchor, y, x }))
            })
        })
    }

    pub fn len(&self) -> usize {
        self.grids.iter().map(|g| g.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
