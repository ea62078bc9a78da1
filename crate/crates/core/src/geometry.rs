//! Boxes, spatial relation classes and interval overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels, `(x1, y1)` top-left and `(x2, y2)` bottom-right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// `self` lies within `other` (borders may touch).
    pub fn is_within(&self, other: &BoundingBox) -> bool {
        self.x1 >= other.x1 && self.y1 >= other.y1 && self.x2 <= other.x2 && self.y2 <= other.y2
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One of the eleven box relations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpatialRelation {
    /// The first box lies inside the second.
    Inside,
    /// The first box contains the second.
    Cover,
    /// Equal boxes or IoU at or above the overlap threshold.
    Overlap,
    /// Direction sector `0..8` of the vector from the first center to the
    /// second, counter-clockwise from +x in 45° bins.
    Direction(u8),
}

impl SpatialRelation {
    pub const COUNT: usize = 11;

    /// Class id in `1..=11`. Id 0 is reserved for self-loops.
    pub fn class_id(self) -> usize {
        match self {
            SpatialRelation::Inside => 1,
            SpatialRelation::Cover => 2,
            SpatialRelation::Overlap => 3,
            SpatialRelation::Direction(s) => 4 + s as usize,
        }
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        match id {
            1 => Some(SpatialRelation::Inside),
            2 => Some(SpatialRelation::Cover),
            3 => Some(SpatialRelation::Overlap),
            4..=11 => Some(SpatialRelation::Direction((id - 4) as u8)),
            _ => None,
        }
    }
}

/// Thresholds of the relation classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRules {
    /// IoU at or above which two boxes overlap.
    pub overlap_iou: f64,
    /// Max center distance, as a fraction of the frame diagonal, for a
    /// directional edge.
    pub distance_gate: f64,
}

impl Default for RelationRules {
    fn default() -> Self {
        RelationRules {
            overlap_iou: 0.5,
            distance_gate: 0.5,
        }
    }
}

/// Classifies the ordered pair `(i, j)`; `None` means no edge.
///
/// Rules in order: equal boxes overlap; `i` inside `j`; `i` covers `j`;
/// IoU ≥ 0.5 overlaps; otherwise, if the centers are within the distance
/// gate, the direction sector of `center(j) - center(i)`. Angles are taken
/// as seen on screen (pixel y grows downwards) and a direction lying exactly
/// on a 45° boundary falls into the higher sector.
pub fn classify_spatial_relation(
    i: &BoundingBox,
    j: &BoundingBox,
    frame_diag: f64,
    rules: &RelationRules,
) -> Result<Option<SpatialRelation>> {
    if !(frame_diag > 0.0 && frame_diag.is_finite()) {
        return Err(Error::Config(format!(
            "frame diagonal must be positive, got {frame_diag}"
        )));
    }
    if i == j {
        return Ok(Some(SpatialRelation::Overlap));
    }
    if i.is_within(j) {
        return Ok(Some(SpatialRelation::Inside));
    }
    if j.is_within(i) {
        return Ok(Some(SpatialRelation::Cover));
    }
    if iou(i, j) >= rules.overlap_iou {
        return Ok(Some(SpatialRelation::Overlap));
    }
    let (cxi, cyi) = i.center();
    let (cxj, cyj) = j.center();
    let (dx, dy) = (cxj - cxi, cyj - cyi);
    if dx.hypot(dy) / frame_diag > rules.distance_gate {
        return Ok(None);
    }
    Ok(Some(SpatialRelation::Direction(direction_sector(dx, -dy))))
}

/// 45° sector of `(x, y)` (y up), `floor(θ / 45°)` with θ ∈ [0°, 360°).
/// Evaluated with comparisons so that boundary directions are exact.
fn direction_sector(x: f64, y: f64) -> u8 {
    fn upper(x: f64, y: f64) -> u8 {
        // θ ∈ [0°, 180°)
        if y == 0.0 || x > y {
            0
        } else if x > 0.0 {
            1
        } else if x == 0.0 || -x < y {
            2
        } else {
            3
        }
    }
    if y < 0.0 || (y == 0.0 && x < 0.0) {
        4 + upper(-x, -y)
    } else {
        upper(x, y)
    }
}

/// Frame diagonal in pixels.
pub fn frame_diagonal(width: f64, height: f64) -> f64 {
    width.hypot(height)
}

/// Half-open frame interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start: usize,
    pub end: usize,
}

impl TimeSpan {
    /// A span inside a video of `frames` frames.
    pub fn new(start: usize, end: usize, frames: usize) -> Result<Self> {
        if start >= end || end > frames {
            return Err(Error::InvalidSpan {
                start,
                end,
                len: frames,
            });
        }
        Ok(TimeSpan { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }

    /// Snaps a span given in seconds to frame indices:
    /// `floor(start * fps)`, `ceil(end * fps)`.
    pub fn from_seconds(start_sec: f64, end_sec: f64, fps: f64, frames: usize) -> Result<Self> {
        const SLACK: f64 = 1e-9;
        let bad = || Error::InvalidSpan {
            start: 0,
            end: 0,
            len: frames,
        };
        if fps.is_nan() || fps <= 0.0 || !start_sec.is_finite() || !end_sec.is_finite() || start_sec < 0.0 {
            return Err(bad());
        }
        let start = (start_sec * fps + SLACK).floor();
        let end = (end_sec * fps - SLACK).ceil();
        if end < 0.0 {
            return Err(bad());
        }
        TimeSpan::new(start as usize, end as usize, frames)
    }
}

/// `|a ∩ b| / |a ∪ b|` on half-open intervals.
pub fn temporal_iou(a: &TimeSpan, b: &TimeSpan) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    const DIAG: f64 = 1000.0;

    fn classify(i: &BoundingBox, j: &BoundingBox) -> Option<SpatialRelation> {
        classify_spatial_relation(i, j, DIAG, &RelationRules::default()).unwrap()
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[0, 0, -1, 1]").is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        // one shared unit cell out of 4 + 4 - 1 = 7
        assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        // touching edges share no area
        assert_eq!(iou(&a, &bx(2.0, 0.0, 3.0, 2.0)), 0.0);
    }

    #[test]
    fn nested_and_equal_boxes() {
        let outer = bx(0.0, 0.0, 10.0, 10.0);
        let inner = bx(2.0, 2.0, 4.0, 4.0);
        assert_eq!(classify(&outer, &inner), Some(SpatialRelation::Cover));
        assert_eq!(classify(&inner, &outer), Some(SpatialRelation::Inside));
        assert_eq!(SpatialRelation::Cover.class_id(), 2);
        assert_eq!(SpatialRelation::Inside.class_id(), 1);
        assert_eq!(classify(&outer, &outer).map(|r| r.class_id()), Some(3));
        // high IoU without nesting
        let shifted = bx(1.0, 0.0, 11.0, 10.0);
        assert_eq!(classify(&outer, &shifted), Some(SpatialRelation::Overlap));
    }

    #[test]
    fn direction_classes() {
        let i = bx(0.0, 0.0, 2.0, 2.0);
        let right = bx(10.0, 0.0, 12.0, 2.0);
        assert_eq!(classify(&i, &right).map(|r| r.class_id()), Some(4));
        assert_eq!(classify(&right, &i).map(|r| r.class_id()), Some(8));
        // above on screen means negative pixel dy: 90°
        let above = bx(0.0, -10.0, 2.0, -8.0);
        assert_eq!(classify(&i, &above), Some(SpatialRelation::Direction(2)));
        // exactly 45° goes to the higher sector
        let diag = bx(10.0, -10.0, 12.0, -8.0);
        assert_eq!(classify(&i, &diag), Some(SpatialRelation::Direction(1)));
        assert_eq!(classify(&diag, &i), Some(SpatialRelation::Direction(5)));
        // exactly 270° and 315°
        let below = bx(0.0, 10.0, 2.0, 12.0);
        assert_eq!(classify(&i, &below), Some(SpatialRelation::Direction(6)));
        let below_right = bx(10.0, 10.0, 12.0, 12.0);
        assert_eq!(classify(&i, &below_right), Some(SpatialRelation::Direction(7)));
    }

    #[test]
    fn distance_gate() {
        let i = bx(0.0, 0.0, 2.0, 2.0);
        let far = bx(600.0, 0.0, 602.0, 2.0);
        assert_eq!(classify(&i, &far), None);
        let edge = bx(500.0, 0.0, 502.0, 2.0);
        assert!(classify(&i, &edge).is_some());
        assert!(classify_spatial_relation(&i, &far, 0.0, &RelationRules::default()).is_err());
    }

    #[test]
    fn class_ids_round_trip() {
        for id in 1..=11 {
            assert_eq!(SpatialRelation::from_class_id(id).unwrap().class_id(), id);
        }
        assert!(SpatialRelation::from_class_id(0).is_none());
        assert!(SpatialRelation::from_class_id(12).is_none());
    }

    #[test]
    fn temporal_iou_examples() {
        let a = TimeSpan::new(2, 6, 10).unwrap();
        assert_eq!(temporal_iou(&a, &a), 1.0);
        let b = TimeSpan::new(3, 7, 10).unwrap();
        assert!((temporal_iou(&a, &b) - 0.6).abs() < 1e-15);
        let c = TimeSpan::new(6, 9, 10).unwrap();
        assert_eq!(temporal_iou(&a, &c), 0.0);
    }

    #[test]
    fn span_validation_and_snapping() {
        assert!(TimeSpan::new(3, 3, 10).is_err());
        assert!(TimeSpan::new(3, 11, 10).is_err());
        let s = TimeSpan::from_seconds(1.2, 3.1, 2.0, 10).unwrap();
        assert_eq!(s, TimeSpan { start: 2, end: 7 });
        let exact = TimeSpan::from_seconds(1.0, 3.0, 1.0, 10).unwrap();
        assert_eq!(exact, TimeSpan { start: 1, end: 3 });
        assert!(TimeSpan::from_seconds(1.0, 12.0, 1.0, 10).is_err());
        assert!(TimeSpan::from_seconds(2.0, 2.0, 1.0, 10).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0f64..100.0, 0.0f64..100.0, 0.5f64..60.0, 0.5f64..60.0).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }

        #[test]
        fn temporal_iou_decreases_with_shift(start in 0usize..20, len in 1usize..10, shift in 0usize..15) {
            let frames = 60;
            let a = TimeSpan::new(start, start + len, frames).unwrap();
            let b = TimeSpan::new(start + shift, start + shift + len, frames).unwrap();
            let c = TimeSpan::new(start + shift + 1, start + shift + 1 + len, frames).unwrap();
            prop_assert!(temporal_iou(&a, &c) <= temporal_iou(&a, &b));
            if shift < len {
                prop_assert!(temporal_iou(&a, &c) < temporal_iou(&a, &b));
            }
        }
    }
}
