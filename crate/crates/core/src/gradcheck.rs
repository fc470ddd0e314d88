//! Checks the finite-difference gradient machinery against closed-form
//! gradients of the cross-entropy and squared-error terms.
//!
//! For a positive slot at stride level `l` with `n_l` positives and `S_l`
//! slots, the closed forms are
//!
//! - class channel `c`: `N * gamma / (n_l (k+1)) * sum (sigmoid(x) - t_c)`
//! - objectness: `N * beta * w_l / S_l * (sigmoid(x) - t_obj)`
//! - offset channel: `N * lambda / n_l * sum 2 (sigmoid(x) - t) sigmoid'(x)`
//!
//! where sums run over the targets sharing the slot.

use crate::geometry::ciou_raw;
use crate::losses::{grad_total, loss_total, LossError, LossWeights, ProbeSet};
use crate::representation::{
    assign_targets, channel, decode_box, sigmoid, GridSpec, ImageAnnotation, PartSchema, RawGridSet,
    RepresentationError, SlotIndex, TargetAssignment,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Largest accepted relative error between the two gradients.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Raw grid entries are drawn uniformly from `[-RAW_RANGE, RAW_RANGE]`.
pub const RAW_RANGE: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradcheckError {
    #[error("annotation has no positive targets")]
    NoTargets,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Number of compared entries.
    pub entries: usize,
    /// Worst relative error, or worst absolute value for exact-zero checks.
    pub worst: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub points: usize,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn random_grids(spec: &GridSpec, schema: &PartSchema, rng: &mut impl Rng) -> RawGridSet {
    let mut g = RawGridSet::filled(spec, schema, 0.0);
    for v in g.grids.iter_mut().flat_map(|l| l.data.iter_mut()) {
        *v = rng.random_range(-RAW_RANGE..=RAW_RANGE);
    }
    g
}

struct Closed<'a> {
    by_slot: BTreeMap<SlotIndex, Vec<&'a TargetAssignment>>,
    positives: Vec<usize>,
}

impl<'a> Closed<'a> {
    fn new(targets: &'a [TargetAssignment], levels: usize) -> Self {
        let mut by_slot: BTreeMap<SlotIndex, Vec<&TargetAssignment>> = BTreeMap::new();
        let mut positives = vec![0; levels];
        for t in targets {
            by_slot.entry(t.slot_index()).or_default().push(t);
            positives[t.level] += 1;
        }
        Self { by_slot, positives }
    }

    fn objectness(&self, grids: &RawGridSet, s: SlotIndex, spec: &GridSpec, w: &LossWeights) -> f64 {
        let slot = grids.grids[s.level].slot(s.anchor, s.y, s.x);
        let target = self.by_slot.get(&s).map_or(0.0, |ts| {
            ts.iter()
                .map(|t| {
                    let anchor = spec.levels[t.level].anchors[t.anchor];
                    let raw = [slot[channel::BOX], slot[channel::BOX + 1], slot[channel::BOX + 2], slot[channel::BOX + 3]];
                    ciou_raw(&decode_box(raw, anchor, t.stride as f64), &t.target_box).clamp(0.0, 1.0)
                })
                .fold(0.0, f64::max)
        });
        let slots = grids.grids[s.level].num_slots() as f64;
        w.batch_size as f64 * w.beta * w.stride_weight(s.level) / slots * (sigmoid(slot[channel::OBJ]) - target)
    }

    fn class(&self, grids: &RawGridSet, s: SlotIndex, c: usize, schema: &PartSchema, w: &LossWeights) -> f64 {
        let x = grids.grids[s.level].get(s.anchor, channel::CLS + c, s.y, s.x);
        let sum: f64 = self.by_slot[&s].iter().map(|t| sigmoid(x) - if t.class == c { 1.0 } else { 0.0 }).sum();
        w.batch_size as f64 * w.gamma / (self.positives[s.level] as f64 * schema.num_classes() as f64) * sum
    }

    /// `j` is the part slot, `axis` 0 for x and 1 for y.
    fn offset(&self, grids: &RawGridSet, s: SlotIndex, j: usize, axis: usize, schema: &PartSchema, w: &LossWeights) -> f64 {
        let x = grids.grids[s.level].get(s.anchor, channel::offsets(schema.k) + 2 * j + axis, s.y, s.x);
        let p = sigmoid(x);
        let sum: f64 = self.by_slot[&s]
            .iter()
            .filter(|t| t.offset_visible[j])
            .map(|t| 2.0 * (p - t.offset_targets[j][axis]) * p * (1.0 - p))
            .sum();
        w.batch_size as f64 * w.lambda / self.positives[s.level] as f64 * sum
    }

    fn reads_offset(&self, s: SlotIndex, j: usize) -> bool {
        self.by_slot.get(&s).is_some_and(|ts| ts.iter().any(|t| t.offset_visible[j]))
    }
}

#[derive(Default)]
struct Tally {
    entries: usize,
    worst: f64,
}

impl Tally {
    fn add(&mut self, v: f64) {
        self.entries += 1;
        self.worst = self.worst.max(v);
    }

    fn check(self, name: &str, tolerance: f64, exact: bool) -> Check {
        let passed = self.entries > 0 && if exact { self.worst == 0.0 } else { self.worst < tolerance };
        Check { name: name.into(), passed, entries: self.entries, worst: self.worst, tolerance }
    }
}

/// Runs every gradient property at `points` random grid states for `ann`.
pub fn gradcheck(
    ann: &ImageAnnotation,
    spec: &GridSpec,
    schema: &PartSchema,
    weights: &LossWeights,
    points: usize,
    seed: u64,
) -> Result<GradcheckReport, GradcheckError> {
    let set = assign_targets(ann, spec, schema)?;
    if set.targets.is_empty() {
        return Err(GradcheckError::NoTargets);
    }
    let closed = Closed::new(&set.targets, spec.levels.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let no_offsets = LossWeights { lambda: 0.0, ..weights.clone() };
    let (mut obj, mut cls, mut off) = (Tally::default(), Tally::default(), Tally::default());
    let (mut unread_grad, mut unread_loss, mut ablation) = (Tally::default(), Tally::default(), Tally::default());
    let off_base = channel::offsets(schema.k);

    for _ in 0..points {
        let grids = random_grids(spec, schema, &mut rng);
        let grad = grad_total(&grids, &set.targets, spec, schema, weights, ProbeSet::All)?;
        let mut unread = Vec::new();
        for s in grids.slots() {
            obj.add(rel_err(grad.get(s.channel(channel::OBJ)), closed.objectness(&grids, s, spec, weights)));
            if closed.by_slot.contains_key(&s) {
                for c in 0..schema.num_classes() {
                    cls.add(rel_err(grad.get(s.channel(channel::CLS + c)), closed.class(&grids, s, c, schema, weights)));
                }
            } else {
                unread.extend((channel::BOX..off_base + 2 * schema.k).map(|c| s.channel(c)));
            }
            for j in 0..schema.k {
                for axis in 0..2 {
                    let i = s.channel(off_base + 2 * j + axis);
                    if closed.reads_offset(s, j) {
                        off.add(rel_err(grad.get(i), closed.offset(&grids, s, j, axis, schema, weights)));
                    } else if closed.by_slot.contains_key(&s) {
                        unread.push(i);
                    }
                }
            }
        }
        for &i in &unread {
            unread_grad.add(grad.get(i).abs());
        }

        let before = loss_total(&grids, &set.targets, spec, schema, weights).l_total;
        let mut moved = grids.clone();
        for &i in &unread {
            moved.set(i, rng.random_range(-RAW_RANGE..=RAW_RANGE) * 10.0);
        }
        let after = loss_total(&moved, &set.targets, spec, schema, weights).l_total;
        unread_loss.add(if before.to_bits() == after.to_bits() { 0.0 } else { (after - before).abs().max(f64::MIN_POSITIVE) });

        let g0 = grad_total(&grids, &set.targets, spec, schema, &no_offsets, ProbeSet::All)?;
        for s in grids.slots() {
            for c in off_base..off_base + 2 * schema.k {
                ablation.add(g0.get(s.channel(c)).abs());
            }
        }
    }

    let checks = vec![
        obj.check("objectness cross-entropy", REL_TOLERANCE, false),
        cls.check("class cross-entropy", REL_TOLERANCE, false),
        off.check("offset squared error", REL_TOLERANCE, false),
        unread_grad.check("zero gradient at unread entries", 0.0, true),
        unread_loss.check("loss unchanged by unread entries", 0.0, true),
        ablation.check("zero offset gradient without offset weight", 0.0, true),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport { points, seed, checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::{BodyRecord, DEFAULT_STRIDES, PartRecord};

    fn ann() -> ImageAnnotation {
        let mut a = ImageAnnotation::empty("g", 128, 128);
        a.bodies.push(BodyRecord {
            bbox: [40.0, 60.0, 30.0, 70.0],
            parts: vec![
                PartRecord { slot: 0, bbox: Some([32.0, 60.0, 8.0, 8.0]), visible: 1 },
                PartRecord { slot: 1, bbox: None, visible: 0 },
            ],
        });
        a.bodies.push(BodyRecord {
            bbox: [90.0, 70.0, 40.0, 90.0],
            parts: vec![
                PartRecord { slot: 0, bbox: Some([78.0, 72.0, 10.0, 10.0]), visible: 1 },
                PartRecord { slot: 1, bbox: Some([102.0, 72.0, 10.0, 10.0]), visible: 1 },
            ],
        });
        a
    }

    #[test]
    fn all_checks_pass() {
        let spec = GridSpec::with_default_anchors(128, 128, &DEFAULT_STRIDES).unwrap();
        let r = gradcheck(&ann(), &spec, &PartSchema::hands(), &LossWeights::default(), 5, 3).unwrap();
        for c in &r.checks {
            assert!(c.passed, "{c:?}");
            assert!(c.entries > 0);
        }
        assert!(r.passed);
    }

    #[test]
    fn empty_annotation_is_an_error() {
        let spec = GridSpec::with_default_anchors(128, 128, &DEFAULT_STRIDES).unwrap();
        let empty = ImageAnnotation::empty("e", 128, 128);
        assert_eq!(
            gradcheck(&empty, &spec, &PartSchema::faces(), &LossWeights::default(), 1, 0),
            Err(GradcheckError::NoTargets)
        );
    }

    #[test]
    fn relative_error_is_symmetric() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(1.0, 0.5), rel_err(0.5, 1.0));
    }
}
