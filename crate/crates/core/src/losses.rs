//! Box (CIoU), objectness, classification and part-offset losses, their
//! weighted total, and finite-difference gradients of the total.
//!
//! Normalization: the box, class and offset terms average over the positive
//! targets of each stride; objectness averages over every anchor-cell slot of
//! the stride and is scaled by the stride's balance weight.

use crate::geometry::ciou_raw;
use crate::representation::{
    channel, decode_box, sigmoid, GridIndex, GridSpec, PartSchema, RawGridSet, SlotIndex, TargetAssignment,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("non-finite loss while probing {index:?} (value {value})")]
    NonFinite { index: GridIndex, value: f64 },
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Per-stride objectness balance, finest stride first.
    pub stride_weights: Vec<f64>,
    pub batch_size: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.7,
            gamma: 0.3,
            lambda: 0.015,
            stride_weights: vec![4.0, 1.0, 0.25, 0.06],
            batch_size: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.alpha, self.beta, self.gamma, self.lambda];
        if all.iter().chain(&self.stride_weights).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LossError::Weights("weights must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(LossError::Weights("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Balance weight for `level`; levels beyond the configured list use 1.
    pub fn stride_weight(&self, level: usize) -> f64 {
        self.stride_weights.get(level).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelLoss {
    pub l_box: f64,
    pub l_obj: f64,
    pub l_cls: f64,
    pub l_bpd: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_obj: f64,
    pub l_cls: f64,
    pub l_bpd: f64,
    pub l_total: f64,
    pub per_level: Vec<LevelLoss>,
}

/// `max(x, 0) - x t + ln(1 + e^-|x|)`
pub fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn raw_box(slot: &[f64]) -> [f64; 4] {
    [slot[channel::BOX], slot[channel::BOX + 1], slot[channel::BOX + 2], slot[channel::BOX + 3]]
}

fn box_term(slot: &[f64], t: &TargetAssignment, spec: &GridSpec) -> f64 {
    let anchor = spec.levels[t.level].anchors[t.anchor];
    let pred = decode_box(raw_box(slot), anchor, t.stride as f64);
    1.0 - ciou_raw(&pred, &t.target_box)
}

fn obj_target(slot: &[f64], t: &TargetAssignment, spec: &GridSpec) -> f64 {
    let anchor = spec.levels[t.level].anchors[t.anchor];
    let pred = decode_box(raw_box(slot), anchor, t.stride as f64);
    ciou_raw(&pred, &t.target_box).clamp(0.0, 1.0)
}

fn cls_term(slot: &[f64], t: &TargetAssignment, schema: &PartSchema) -> f64 {
    let n = schema.num_classes();
    let sum: f64 = (0..n)
        .map(|c| bce_with_logits(slot[channel::CLS + c], if c == t.class { 1.0 } else { 0.0 }))
        .sum();
    sum / n as f64
}

fn bpd_term(slot: &[f64], t: &TargetAssignment, schema: &PartSchema) -> f64 {
    let base = channel::offsets(schema.k);
    t.offset_visible
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .map(|(j, _)| {
            let dx = sigmoid(slot[base + 2 * j]) - t.offset_targets[j][0];
            let dy = sigmoid(slot[base + 2 * j + 1]) - t.offset_targets[j][1];
            dx * dx + dy * dy
        })
        .sum()
}

/// Positive targets grouped by slot, with the objectness target frozen at the
/// grid state the plan was built from.
struct LossPlan<'a> {
    targets: &'a [TargetAssignment],
    by_slot: BTreeMap<SlotIndex, Vec<usize>>,
    obj_targets: BTreeMap<SlotIndex, f64>,
    positives: Vec<usize>,
    slots: Vec<usize>,
}

impl<'a> LossPlan<'a> {
    fn new(grids: &RawGridSet, targets: &'a [TargetAssignment], spec: &GridSpec) -> Self {
        let mut by_slot: BTreeMap<SlotIndex, Vec<usize>> = BTreeMap::new();
        let mut positives = vec![0; grids.grids.len()];
        for (i, t) in targets.iter().enumerate() {
            by_slot.entry(t.slot_index()).or_default().push(i);
            positives[t.level] += 1;
        }
        // several targets may share a slot; the objectness target is the best match
        let obj_targets = by_slot
            .iter()
            .map(|(s, idx)| {
                let slot = grids.grids[s.level].slot(s.anchor, s.y, s.x);
                let best = idx.iter().map(|&i| obj_target(&slot, &targets[i], spec)).fold(0.0, f64::max);
                (*s, best)
            })
            .collect();
        let slots = grids.grids.iter().map(|g| g.num_slots()).collect();
        Self { targets, by_slot, obj_targets, positives, slots }
    }

    /// Every weighted loss contribution that reads `slot`, given its channel values.
    fn local(&self, s: SlotIndex, slot: &[f64], schema: &PartSchema, spec: &GridSpec, w: &LossWeights) -> f64 {
        let obj_t = self.obj_targets.get(&s).copied().unwrap_or(0.0);
        let mut v = w.beta * w.stride_weight(s.level) / self.slots[s.level] as f64
            * bce_with_logits(slot[channel::OBJ], obj_t);
        if let Some(idx) = self.by_slot.get(&s) {
            let npos = self.positives[s.level] as f64;
            for &i in idx {
                let t = &self.targets[i];
                v += (w.alpha * box_term(slot, t, spec)
                    + w.gamma * cls_term(slot, t, schema)
                    + w.lambda * bpd_term(slot, t, schema))
                    / npos;
            }
        }
        w.batch_size as f64 * v
    }
}

fn per_level<F>(grids: &RawGridSet, targets: &[TargetAssignment], mut term: F) -> Vec<f64>
where
    F: FnMut(&[f64], &TargetAssignment) -> f64,
{
    let mut sums = vec![0.0; grids.grids.len()];
    let mut counts = vec![0usize; grids.grids.len()];
    for t in targets {
        let slot = grids.grids[t.level].slot(t.anchor, t.cell.1, t.cell.0);
        sums[t.level] += term(&slot, t);
        counts[t.level] += 1;
    }
    sums.iter().zip(&counts).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect()
}

fn level_box(grids: &RawGridSet, targets: &[TargetAssignment], spec: &GridSpec) -> Vec<f64> {
    per_level(grids, targets, |slot, t| box_term(slot, t, spec))
}

fn level_cls(grids: &RawGridSet, targets: &[TargetAssignment], schema: &PartSchema) -> Vec<f64> {
    per_level(grids, targets, |slot, t| cls_term(slot, t, schema))
}

fn level_bpd(grids: &RawGridSet, targets: &[TargetAssignment], schema: &PartSchema) -> Vec<f64> {
    per_level(grids, targets, |slot, t| bpd_term(slot, t, schema))
}

fn level_obj(grids: &RawGridSet, targets: &[TargetAssignment], spec: &GridSpec, w: &LossWeights) -> Vec<f64> {
    let plan = LossPlan::new(grids, targets, spec);
    grids
        .grids
        .iter()
        .enumerate()
        .map(|(level, g)| {
            let mut sum = 0.0;
            for a in 0..g.anchors {
                for y in 0..g.h {
                    for x in 0..g.w {
                        let s = SlotIndex { level, anchor: a, y, x };
                        let t = plan.obj_targets.get(&s).copied().unwrap_or(0.0);
                        sum += bce_with_logits(g.get(a, channel::OBJ, y, x), t);
                    }
                }
            }
            w.stride_weight(level) * sum / g.num_slots() as f64
        })
        .collect()
}

/// Mean `1 - CIoU` over positives, summed over strides.
pub fn loss_box(grids: &RawGridSet, targets: &[TargetAssignment], spec: &GridSpec, _schema: &PartSchema) -> f64 {
    level_box(grids, targets, spec).iter().sum()
}

/// Objectness BCE over all slots against the clamped CIoU of positive slots.
pub fn loss_obj(
    grids: &RawGridSet,
    targets: &[TargetAssignment],
    spec: &GridSpec,
    _schema: &PartSchema,
    weights: &LossWeights,
) -> f64 {
    level_obj(grids, targets, spec, weights).iter().sum()
}

/// Multi-label BCE over the `k + 1` class channels of each positive, averaged
/// over channels and positives.
pub fn loss_cls(grids: &RawGridSet, targets: &[TargetAssignment], _spec: &GridSpec, schema: &PartSchema) -> f64 {
    level_cls(grids, targets, schema).iter().sum()
}

/// Squared distance between sigmoid offsets and normalized targets, summed
/// over visible slots and averaged over positives.
pub fn loss_bpd(grids: &RawGridSet, targets: &[TargetAssignment], _spec: &GridSpec, schema: &PartSchema) -> f64 {
    level_bpd(grids, targets, schema).iter().sum()
}

pub fn loss_total(
    grids: &RawGridSet,
    targets: &[TargetAssignment],
    spec: &GridSpec,
    schema: &PartSchema,
    weights: &LossWeights,
) -> LossBreakdown {
    let b = level_box(grids, targets, spec);
    let o = level_obj(grids, targets, spec, weights);
    let c = level_cls(grids, targets, schema);
    let d = level_bpd(grids, targets, schema);
    let per_level: Vec<LevelLoss> = (0..grids.grids.len())
        .map(|l| LevelLoss { l_box: b[l], l_obj: o[l], l_cls: c[l], l_bpd: d[l] })
        .collect();
    let l_box = b.iter().sum();
    let l_obj = o.iter().sum();
    let l_cls = c.iter().sum();
    let l_bpd = d.iter().sum();
    LossBreakdown {
        l_box,
        l_obj,
        l_cls,
        l_bpd,
        l_total: combine(weights, l_box, l_obj, l_cls, l_bpd),
        per_level,
    }
}

pub fn combine(w: &LossWeights, l_box: f64, l_obj: f64, l_cls: f64, l_bpd: f64) -> f64 {
    w.batch_size as f64 * (w.alpha * l_box + w.beta * l_obj + w.gamma * l_cls + w.lambda * l_bpd)
}

/// Which raw entries get a finite-difference probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeSet {
    /// Every channel of positive slots and objectness everywhere.
    All,
    /// Every channel of positive slots and objectness at a seeded random
    /// fraction of the negative slots.
    Touched { negative_fraction: f64, seed: u64 },
}

pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseGradient {
    /// Sorted by index; entries not listed have gradient exactly 0.
    pub entries: Vec<(GridIndex, f64)>,
}

impl SparseGradient {
    pub fn get(&self, index: GridIndex) -> f64 {
        self.entries
            .binary_search_by(|(i, _)| i.cmp(&index))
            .map(|p| self.entries[p].1)
            .unwrap_or(0.0)
    }

    /// `grids -= lr * gradient`
    pub fn descend(&self, grids: &mut RawGridSet, lr: f64) {
        for &(i, g) in &self.entries {
            let v = grids.get(i);
            grids.set(i, v - lr * g);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|(_, g)| g.abs()).fold(0.0, f64::max)
    }
}

fn probe_channels(
    grids: &RawGridSet,
    plan: &LossPlan<'_>,
    probes: ProbeSet,
) -> Vec<(SlotIndex, Vec<usize>)> {
    let all_channels: Vec<usize> = (0..grids.grids.first().map_or(0, |g| g.channels)).collect();
    let mut rng = match probes {
        ProbeSet::Touched { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        ProbeSet::All => None,
    };
    let mut out = Vec::new();
    for s in grids.slots() {
        if plan.by_slot.contains_key(&s) {
            out.push((s, all_channels.clone()));
            continue;
        }
        let keep = match (probes, rng.as_mut()) {
            (ProbeSet::Touched { negative_fraction, .. }, Some(r)) => r.random::<f64>() < negative_fraction,
            _ => true,
        };
        if keep {
            out.push((s, vec![channel::OBJ]));
        }
    }
    out
}

fn probe_slot(
    grids: &RawGridSet,
    plan: &LossPlan<'_>,
    s: SlotIndex,
    channels: &[usize],
    spec: &GridSpec,
    schema: &PartSchema,
    weights: &LossWeights,
) -> Result<Vec<(GridIndex, f64)>, LossError> {
    let mut slot = grids.grids[s.level].slot(s.anchor, s.y, s.x);
    let mut out = Vec::with_capacity(channels.len());
    for &c in channels {
        let base = slot[c];
        slot[c] = base + FD_STEP;
        let up = plan.local(s, &slot, schema, spec, weights);
        slot[c] = base - FD_STEP;
        let down = plan.local(s, &slot, schema, spec, weights);
        slot[c] = base;
        let g = (up - down) / (2.0 * FD_STEP);
        let index = s.channel(c);
        if !g.is_finite() {
            let value = if up.is_finite() { down } else { up };
            return Err(LossError::NonFinite { index, value });
        }
        out.push((index, g));
    }
    Ok(out)
}

/// Central finite-difference gradient of the total loss. Each probe only
/// re-evaluates the terms that read the probed slot, which equals the
/// difference of the full loss; the objectness target stays frozen.
pub fn grad_total(
    grids: &RawGridSet,
    targets: &[TargetAssignment],
    spec: &GridSpec,
    schema: &PartSchema,
    weights: &LossWeights,
    probes: ProbeSet,
) -> Result<SparseGradient, LossError> {
    let plan = LossPlan::new(grids, targets, spec);
    let work = probe_channels(grids, &plan, probes);

    #[cfg(feature = "parallel")]
    let chunks: Vec<Result<Vec<(GridIndex, f64)>, LossError>> = {
        use rayon::prelude::*;
        work.par_iter()
            .map(|(s, ch)| probe_slot(grids, &plan, *s, ch, spec, schema, weights))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chunks: Vec<Result<Vec<(GridIndex, f64)>, LossError>> = work
        .iter()
        .map(|(s, ch)| probe_slot(grids, &plan, *s, ch, spec, schema, weights))
        .collect();

    let mut entries = Vec::new();
    for c in chunks {
        entries.extend(c?);
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(SparseGradient { entries })
}

/// Total loss with the objectness target frozen at `frozen_from`. Equals
/// `loss_total(..).l_total` when `frozen_from == grids`.
pub fn total_with_frozen_objectness(
    grids: &RawGridSet,
    frozen_from: &RawGridSet,
    targets: &[TargetAssignment],
    spec: &GridSpec,
    schema: &PartSchema,
    weights: &LossWeights,
) -> f64 {
    let plan = LossPlan::new(frozen_from, targets, spec);
    grids
        .slots()
        .map(|s| plan.local(s, &grids.grids[s.level].slot(s.anchor, s.y, s.x), schema, spec, weights))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::{
        assign_targets, encode_box, logit, Anchor, BodyRecord, GridLevel, ImageAnnotation, PartRecord,
    };
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn small_spec() -> GridSpec {
        GridSpec {
            image_w: 64,
            image_h: 64,
            levels: vec![
                GridLevel { stride: 8, anchors: vec![Anchor::new(16.0, 32.0), Anchor::new(8.0, 8.0)] },
                GridLevel { stride: 16, anchors: vec![Anchor::new(24.0, 48.0)] },
            ],
        }
    }

    fn scene() -> ImageAnnotation {
        let mut ann = ImageAnnotation::empty("t", 64, 64);
        ann.bodies.push(BodyRecord {
            bbox: [22.0, 30.0, 18.0, 36.0],
            parts: vec![PartRecord { slot: 0, bbox: Some([22.0, 18.0, 6.0, 6.0]), visible: 1 }],
        });
        ann.bodies.push(BodyRecord {
            bbox: [44.0, 36.0, 16.0, 30.0],
            parts: vec![PartRecord { slot: 0, bbox: None, visible: 0 }],
        });
        ann
    }

    fn perfect(spec: &GridSpec, schema: &PartSchema, targets: &[TargetAssignment]) -> RawGridSet {
        let mut g = RawGridSet::with_objectness(spec, schema, -20.0);
        for t in targets {
            let s = t.slot_index();
            let a = spec.levels[t.level].anchors[t.anchor];
            let raw = encode_box(&t.target_box, a, t.stride as f64).unwrap();
            for (i, r) in raw.iter().enumerate() {
                g.set(s.channel(channel::BOX + i), *r);
            }
            g.set(s.channel(channel::OBJ), 20.0);
            for c in 0..schema.num_classes() {
                g.set(s.channel(channel::CLS + c), if c == t.class { 20.0 } else { -20.0 });
            }
            for (j, vis) in t.offset_visible.iter().enumerate() {
                if *vis {
                    let base = channel::offsets(schema.k) + 2 * j;
                    g.set(s.channel(base), logit(t.offset_targets[j][0]));
                    g.set(s.channel(base + 1), logit(t.offset_targets[j][1]));
                }
            }
        }
        g
    }

    #[test]
    fn bce_matches_naive_form() {
        for &(x, t) in &[(0.3, 0.2), (-2.0, 1.0), (5.0, 0.0), (0.0, 0.5)] {
            let p = sigmoid(x);
            let naive = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert_abs_diff_eq!(bce_with_logits(x, t), naive, epsilon = 1e-12);
        }
        assert!(bce_with_logits(-1000.0, 0.0) >= 0.0);
    }

    #[test]
    fn perfect_grids_sit_on_the_floor() {
        let spec = small_spec();
        let schema = PartSchema::faces();
        let set = assign_targets(&scene(), &spec, &schema).unwrap();
        let g = perfect(&spec, &schema, &set.targets);
        let l = loss_total(&g, &set.targets, &spec, &schema, &LossWeights::default());
        assert!(l.l_box < 1e-12, "{}", l.l_box);
        assert!(l.l_bpd < 1e-20, "{}", l.l_bpd);
        assert!(l.l_obj < 1e-6 && l.l_cls < 1e-6);
    }

    #[test]
    fn empty_targets_give_zero_positive_terms() {
        let spec = small_spec();
        let schema = PartSchema::faces();
        let g = RawGridSet::filled(&spec, &schema, 0.3);
        assert_eq!(loss_box(&g, &[], &spec, &schema), 0.0);
        assert_eq!(loss_cls(&g, &[], &spec, &schema), 0.0);
        assert_eq!(loss_bpd(&g, &[], &spec, &schema), 0.0);
        let neg = RawGridSet::with_objectness(&spec, &schema, -20.0);
        assert!(loss_obj(&neg, &[], &spec, &schema, &LossWeights::default()) < 1e-7);
    }

    #[test]
    fn uniform_zero_objectness_costs_ln2_per_slot() {
        // 2 cells, 1 anchor, one stride
        let spec = GridSpec {
            image_w: 16,
            image_h: 8,
            levels: vec![GridLevel { stride: 8, anchors: vec![Anchor::new(8.0, 8.0)] }],
        };
        let schema = PartSchema::faces();
        let g = RawGridSet::filled(&spec, &schema, 0.0);
        let w = LossWeights { stride_weights: vec![1.0], ..Default::default() };
        assert_abs_diff_eq!(loss_obj(&g, &[], &spec, &schema, &w), LN_2, epsilon = 1e-15);
        let w = LossWeights { stride_weights: vec![4.0], ..Default::default() };
        assert_abs_diff_eq!(loss_obj(&g, &[], &spec, &schema, &w), 4.0 * LN_2, epsilon = 1e-14);
    }

    #[test]
    fn class_and_offset_closed_forms() {
        let spec = small_spec();
        let schema = PartSchema::faces();
        let set = assign_targets(&scene(), &spec, &schema).unwrap();
        let one: Vec<TargetAssignment> = set
            .targets
            .iter()
            .filter(|t| t.kind == crate::representation::ObjectKind::Body && t.offset_visible[0])
            .take(1)
            .cloned()
            .collect();
        let t = &one[0];
        let mut g = perfect(&spec, &schema, &one);
        let s = t.slot_index();
        // class logits all zero: ln 2 per channel
        for c in 0..2 {
            g.set(s.channel(channel::CLS + c), 0.0);
        }
        assert_abs_diff_eq!(loss_cls(&g, &one, &spec, &schema), LN_2, epsilon = 1e-15);
        // offsets displaced by (0.1, -0.2) in sigmoid space
        let base = channel::offsets(1);
        g.set(s.channel(base), logit(t.offset_targets[0][0] + 0.1));
        g.set(s.channel(base + 1), logit(t.offset_targets[0][1] - 0.2));
        assert_abs_diff_eq!(loss_bpd(&g, &one, &spec, &schema), 0.05, epsilon = 1e-12);
    }

    #[test]
    fn box_loss_of_one_perturbed_prediction() {
        let spec = small_spec();
        let schema = PartSchema::faces();
        let set = assign_targets(&scene(), &spec, &schema).unwrap();
        let one = vec![set.targets[0].clone()];
        let mut g = perfect(&spec, &schema, &one);
        let s = one[0].slot_index();
        g.set(s.channel(channel::BOX), 0.7);
        g.set(s.channel(channel::BOX + 3), -0.4);
        let anchor = spec.levels[one[0].level].anchors[one[0].anchor];
        let pred = decode_box(
            [0.7, g.get(s.channel(2)), g.get(s.channel(3)), -0.4],
            anchor,
            one[0].stride as f64,
        );
        let expected = 1.0 - crate::geometry::ciou(&pred, &one[0].target_box).unwrap();
        assert_abs_diff_eq!(loss_box(&g, &one, &spec, &schema), expected, epsilon = 1e-15);
    }

    #[test]
    fn default_weights_combine() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(combine(&w, 1.0, 1.0, 1.0, 1.0), 1.065, epsilon = 1e-12);
        let w2 = LossWeights { batch_size: 2, ..Default::default() };
        assert_abs_diff_eq!(combine(&w2, 0.3, 0.2, 0.1, 0.7), 2.0 * combine(&w, 0.3, 0.2, 0.1, 0.7), epsilon = 1e-15);
    }

    #[test]
    fn breakdown_invariant_and_ablation() {
        let spec = small_spec();
        let schema = PartSchema::faces();
        let set = assign_targets(&scene(), &spec, &schema).unwrap();
        let mut g = RawGridSet::with_objectness(&spec, &schema, -3.0);
        for (n, v) in g.grids[0].data.iter_mut().enumerate() {
            *v += ((n * 7919) % 13) as f64 * 0.05 - 0.3;
        }
        let w = LossWeights::default();
        let l = loss_total(&g, &set.targets, &spec, &schema, &w);
        assert_abs_diff_eq!(
            l.l_total,
            w.alpha * l.l_box + w.beta * l.l_obj + w.gamma * l.l_cls + w.lambda * l.l_bpd,
            epsilon = 1e-9
        );
        let no_bpd = LossWeights { lambda: 0.0, ..w.clone() };
        let base = loss_total(&g, &set.targets, &spec, &schema, &no_bpd).l_total;
        let off = channel::offsets(1);
        for t in &set.targets {
            g.set(t.slot_index().channel(off), 3.0);
        }
        assert_eq!(loss_total(&g, &set.targets, &spec, &schema, &no_bpd).l_total, base);
    }

    #[test]
    fn permutation_invariance() {
        let spec = small_spec();
        let schema = PartSchema::faces();
        let set = assign_targets(&scene(), &spec, &schema).unwrap();
        let g = RawGridSet::filled(&spec, &schema, 0.2);
        let w = LossWeights::default();
        let a = loss_total(&g, &set.targets, &spec, &schema, &w);
        let mut rev = set.targets.clone();
        rev.reverse();
        let b = loss_total(&g, &rev, &spec, &schema, &w);
        for (x, y) in [(a.l_box, b.l_box), (a.l_obj, b.l_obj), (a.l_cls, b.l_cls), (a.l_bpd, b.l_bpd)] {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn local_probes_match_full_loss_differences() {
        let spec = small_spec();
        let schema = PartSchema::faces();
        let set = assign_targets(&scene(), &spec, &schema).unwrap();
        let mut g = RawGridSet::with_objectness(&spec, &schema, -1.0);
        for (n, v) in g.grids[0].data.iter_mut().enumerate() {
            *v += ((n * 104729) % 17) as f64 * 0.04 - 0.3;
        }
        let w = LossWeights::default();
        let grad = grad_total(&g, &set.targets, &spec, &schema, &w, ProbeSet::All).unwrap();
        let frozen = g.clone();
        let mut checked = 0;
        for &(i, gv) in grad.entries.iter().step_by(11) {
            let mut up = g.clone();
            up.set(i, g.get(i) + FD_STEP);
            let mut down = g.clone();
            down.set(i, g.get(i) - FD_STEP);
            let full = (total_with_frozen_objectness(&up, &frozen, &set.targets, &spec, &schema, &w)
                - total_with_frozen_objectness(&down, &frozen, &set.targets, &spec, &schema, &w))
                / (2.0 * FD_STEP);
            assert!((full - gv).abs() <= 1e-7 * gv.abs().max(1e-4), "{i:?}: {full} vs {gv}");
            checked += 1;
        }
        assert!(checked > 10);
        assert_abs_diff_eq!(
            total_with_frozen_objectness(&g, &frozen, &set.targets, &spec, &schema, &w),
            loss_total(&g, &set.targets, &spec, &schema, &w).l_total,
            epsilon = 1e-12
        );
    }

    #[test]
    fn unread_entries_have_no_gradient() {
        let spec = small_spec();
        let schema = PartSchema::faces();
        let set = assign_targets(&scene(), &spec, &schema).unwrap();
        let g = RawGridSet::filled(&spec, &schema, 0.1);
        let grad = grad_total(&g, &set.targets, &spec, &schema, &LossWeights::default(), ProbeSet::All).unwrap();
        let positive: std::collections::BTreeSet<_> = set.targets.iter().map(|t| t.slot_index()).collect();
        let untouched = g.slots().find(|s| !positive.contains(s)).unwrap();
        assert_eq!(grad.get(untouched.channel(channel::BOX)), 0.0);
        assert_ne!(grad.get(untouched.channel(channel::OBJ)), 0.0);
        let sampled = grad_total(
            &g,
            &set.targets,
            &spec,
            &schema,
            &LossWeights::default(),
            ProbeSet::Touched { negative_fraction: 0.1, seed: 3 },
        )
        .unwrap();
        assert!(sampled.entries.len() < grad.entries.len());
        let again = grad_total(
            &g,
            &set.targets,
            &spec,
            &schema,
            &LossWeights::default(),
            ProbeSet::Touched { negative_fraction: 0.1, seed: 3 },
        )
        .unwrap();
        assert_eq!(sampled, again);
    }

    #[test]
    fn non_finite_loss_reports_coordinates() {
        let spec = small_spec();
        let schema = PartSchema::faces();
        let set = assign_targets(&scene(), &spec, &schema).unwrap();
        let mut g = RawGridSet::filled(&spec, &schema, 0.0);
        let s = set.targets[0].slot_index();
        g.set(s.channel(channel::CLS), f64::NAN);
        let err = grad_total(&g, &set.targets, &spec, &schema, &LossWeights::default(), ProbeSet::All).unwrap_err();
        assert!(matches!(err, LossError::NonFinite { index, .. } if index.level == s.level));
    }
}
