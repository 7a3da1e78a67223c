use serde::{Deserialize, Serialize};

use super::relation::SpatialRelation;
use crate::error::{Result, VsdError};

/// Axis-aligned box in normalized image coordinates, `y` growing downward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = VsdError;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.to_array();
        if c.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(VsdError::InvalidInput(format!(
                "bounding box {c:?} has coordinates outside [0, 1]"
            )));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(VsdError::InvalidInput(format!(
                "bounding box {c:?} is degenerate"
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn horizontal_overlap(&self, other: &BBox) -> f64 {
        (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0)
    }

    pub fn vertical_overlap(&self, other: &BBox) -> f64 {
        (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        self.horizontal_overlap(other) * self.vertical_overlap(other)
    }
}

/// Thresholds of the rule-based relation labeller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationThresholds {
    /// Fraction of o1's area inside o2 for `in`.
    pub containment: f64,
    /// Horizontal overlap, as a fraction of o1's width, required for `on`.
    pub on_overlap: f64,
    /// Allowed gap between o1's bottom edge and o2's top edge for `on` (ε).
    pub on_epsilon: f64,
    /// Depth difference separating depth bands (δ).
    pub depth_delta: f64,
    /// Vertical center offset required for `above` / `under`.
    pub vertical_separation: f64,
    /// Center distance below which leftover pairs are `next_to`.
    pub next_to_distance: f64,
}

impl Default for RelationThresholds {
    fn default() -> Self {
        RelationThresholds {
            containment: 0.95,
            on_overlap: 0.5,
            on_epsilon: 0.02,
            depth_delta: 0.2,
            vertical_separation: 0.15,
            next_to_distance: 0.15,
        }
    }
}

impl RelationThresholds {
    /// Scales every distance-like threshold by `factor` and shifts the two
    /// fractional thresholds by `fraction_shift`.
    pub fn perturbed(&self, factor: f64, fraction_shift: f64) -> Self {
        RelationThresholds {
            containment: (self.containment + fraction_shift).clamp(0.0, 1.0),
            on_overlap: (self.on_overlap + fraction_shift).clamp(0.0, 1.0),
            on_epsilon: self.on_epsilon * factor,
            depth_delta: self.depth_delta * factor,
            vertical_separation: self.vertical_separation * factor,
            next_to_distance: self.next_to_distance * factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.containment,
            self.on_overlap,
            self.on_epsilon,
            self.depth_delta,
            self.vertical_separation,
            self.next_to_distance,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(VsdError::Config(format!(
                "relation thresholds must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Labels the relation of `o1` to `o2` by a fixed rule order:
/// in, on, above/under, behind/in front of, left/right, next to, and a
/// vertical-ordering fallback for distant pairs. Total on valid boxes.
pub fn ground_truth_relation(
    o1: &BBox,
    depth1: f64,
    o2: &BBox,
    depth2: f64,
    th: &RelationThresholds,
) -> SpatialRelation {
    let dd = depth1 - depth2;
    let same_band = dd.abs() <= th.depth_delta;
    let (cx1, cy1) = o1.center();
    let (cx2, cy2) = o2.center();
    let (dx, dy) = (cx1 - cx2, cy1 - cy2);
    let h_overlap = o1.horizontal_overlap(o2);

    if same_band && o1.intersection_area(o2) >= th.containment * o1.area() {
        return SpatialRelation::In;
    }
    if same_band
        && h_overlap >= th.on_overlap * o1.width()
        && (o1.y_max - o2.y_min).abs() <= th.on_epsilon
    {
        return SpatialRelation::On;
    }
    if h_overlap > 0.0 && dy.abs() > th.vertical_separation {
        return if dy < 0.0 {
            SpatialRelation::Above
        } else {
            SpatialRelation::Under
        };
    }
    if dd.abs() > th.depth_delta {
        return if dd > 0.0 {
            SpatialRelation::Behind
        } else {
            SpatialRelation::InFrontOf
        };
    }
    if dx.abs() > dy.abs() {
        return if dx < 0.0 {
            SpatialRelation::ToTheLeftOf
        } else {
            SpatialRelation::ToTheRightOf
        };
    }
    if (dx * dx + dy * dy).sqrt() < th.next_to_distance {
        return SpatialRelation::NextTo;
    }
    if dy < 0.0 {
        SpatialRelation::Above
    } else {
        SpatialRelation::Under
    }
}

/// True when the label is stable under ±20% changes of the distance
/// thresholds and ±0.03 changes of the fractional ones.
pub fn is_unambiguous(
    o1: &BBox,
    depth1: f64,
    o2: &BBox,
    depth2: f64,
    th: &RelationThresholds,
) -> bool {
    let base = ground_truth_relation(o1, depth1, o2, depth2, th);
    [(0.8, -0.03), (1.2, 0.03), (0.8, 0.03), (1.2, -0.03)]
        .iter()
        .all(|&(f, s)| ground_truth_relation(o1, depth1, o2, depth2, &th.perturbed(f, s)) == base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use SpatialRelation::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BBox::new(0.5, 0.1, 0.4, 0.2).is_err());
        assert!(BBox::new(0.1, 0.1, 1.2, 0.2).is_err());
        assert!(BBox::new(0.1, 0.1, 0.1, 0.2).is_err());
    }

    #[test]
    fn contained_box_is_in() {
        let th = RelationThresholds::default();
        let rel = ground_truth_relation(&b(0.4, 0.4, 0.5, 0.5), 0.3, &b(0.2, 0.2, 0.8, 0.8), 0.3, &th);
        assert_eq!(rel, In);
    }

    #[test]
    fn horizontally_ordered_centers_are_left_of() {
        let th = RelationThresholds::default();
        let rel = ground_truth_relation(&b(0.1, 0.4, 0.3, 0.6), 0.5, &b(0.7, 0.45, 0.9, 0.6), 0.5, &th);
        assert_eq!(rel, ToTheLeftOf);
    }

    #[test]
    fn equal_boxes_with_depth_gap_are_behind() {
        let th = RelationThresholds::default();
        let bx = b(0.3, 0.3, 0.6, 0.6);
        assert_eq!(ground_truth_relation(&bx, 0.7, &bx, 0.3, &th), Behind);
        assert_eq!(ground_truth_relation(&bx, 0.3, &bx, 0.7, &th), InFrontOf);
    }

    #[test]
    fn resting_box_is_on() {
        let th = RelationThresholds::default();
        let cup = b(0.45, 0.4, 0.55, 0.5);
        let table = b(0.3, 0.51, 0.8, 0.7);
        assert_eq!(ground_truth_relation(&cup, 0.4, &table, 0.45, &th), On);
    }

    #[test]
    fn separated_overlapping_boxes_are_above_or_under() {
        let th = RelationThresholds::default();
        let lamp = b(0.4, 0.05, 0.6, 0.2);
        let table = b(0.3, 0.5, 0.8, 0.7);
        assert_eq!(ground_truth_relation(&lamp, 0.4, &table, 0.4, &th), Above);
        assert_eq!(ground_truth_relation(&table, 0.4, &lamp, 0.4, &th), Under);
    }

    #[test]
    fn close_vertical_neighbours_are_next_to() {
        let th = RelationThresholds::default();
        let a = b(0.40, 0.40, 0.60, 0.60);
        let c = b(0.41, 0.45, 0.61, 0.65);
        assert_eq!(ground_truth_relation(&a, 0.4, &c, 0.45, &th), NextTo);
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        let w = rng.random_range(0.02..0.6);
        let h = rng.random_range(0.02..0.6);
        let x = rng.random_range(0.0..1.0 - w);
        let y = rng.random_range(0.0..1.0 - h);
        b(x, y, x + w, y + h)
    }

    /// Pairs where neither order triggers the two asymmetric rules.
    fn symmetric_regime(o1: &BBox, d1: f64, o2: &BBox, d2: f64, th: &RelationThresholds) -> bool {
        let fwd = ground_truth_relation(o1, d1, o2, d2, th);
        let bwd = ground_truth_relation(o2, d2, o1, d1, th);
        ![fwd, bwd].iter().any(|r| matches!(r, In | On))
    }

    #[test]
    fn antisymmetry_on_random_pairs() {
        let th = RelationThresholds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut checked = 0;
        for _ in 0..10_000 {
            let (o1, o2) = (random_box(&mut rng), random_box(&mut rng));
            let (d1, d2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let fwd = ground_truth_relation(&o1, d1, &o2, d2, &th);
            let bwd = ground_truth_relation(&o2, d2, &o1, d1, &th);
            if matches!(fwd, Behind | InFrontOf) {
                assert_eq!(Some(bwd), fwd.inverse(), "{o1:?} {o2:?} {d1} {d2}");
            }
            if symmetric_regime(&o1, d1, &o2, d2, &th) {
                checked += 1;
                if let Some(inv) = fwd.inverse() {
                    assert_eq!(bwd, inv, "{o1:?} {o2:?} {d1} {d2}");
                }
                if fwd == NextTo {
                    assert_eq!(bwd, NextTo);
                }
            }
        }
        assert!(checked > 8_000, "only {checked} pairs in the symmetric regime");
    }

    proptest! {
        #[test]
        fn labelling_is_deterministic_and_total(
            x in 0.0f64..0.5, y in 0.0f64..0.5, w in 0.01f64..0.5, h in 0.01f64..0.5,
            x2 in 0.0f64..0.5, y2 in 0.0f64..0.5, w2 in 0.01f64..0.5, h2 in 0.01f64..0.5,
            d1 in 0.0f64..1.0, d2 in 0.0f64..1.0,
        ) {
            let th = RelationThresholds::default();
            let o1 = b(x, y, x + w, y + h);
            let o2 = b(x2, y2, x2 + w2, y2 + h2);
            let r = ground_truth_relation(&o1, d1, &o2, d2, &th);
            prop_assert_eq!(r, ground_truth_relation(&o1, d1, &o2, d2, &th));
        }
    }
}
