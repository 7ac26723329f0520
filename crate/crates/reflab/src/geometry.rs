//! Axis-aligned box arithmetic: IoU, centers, and the spatial-relation
//! predicates that define ground truth for generation and annotation.
//!
//! Coordinates are normalized image units in [0, 1]; y grows downward,
//! so "above" means smaller center y.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Category, Color, SizeAttr};

/// Correctness threshold used throughout unless overridden.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Relation margin in normalized units; near-ties inside the margin band
/// count as neither direction.
pub const DEFAULT_MARGIN: f64 = 0.05;

/// A grounding candidate: an axis-aligned rectangle with labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub category: Category,
    pub color: Color,
    pub size: SizeAttr,
}

impl Box {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= 1.0
            && self.y + self.h <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationLabel {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; 4] = [
        RelationLabel::LeftOf,
        RelationLabel::RightOf,
        RelationLabel::Above,
        RelationLabel::Below,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "left_of" => Ok(RelationLabel::LeftOf),
            "right_of" => Ok(RelationLabel::RightOf),
            "above" => Ok(RelationLabel::Above),
            "below" => Ok(RelationLabel::Below),
            other => Err(Error::UnknownRelation(other.to_string())),
        }
    }
}

/// Intersection-over-union, exact closed form.
///
/// Computed in 1/100 units, with ordinates within 1e-9 of a grid line
/// snapped onto it, so boxes whose coordinates lie on the 1/100 grid
/// produce exactly the same f64 as integer cell counting.
pub fn iou(a: &Box, b: &Box) -> f64 {
    const S: f64 = 100.0;
    fn snap(v: f64) -> f64 {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    }
    let (ax0, ay0) = (snap(a.x * S), snap(a.y * S));
    let (ax1, ay1) = (snap((a.x + a.w) * S), snap((a.y + a.h) * S));
    let (bx0, by0) = (snap(b.x * S), snap(b.y * S));
    let (bx1, by1) = (snap((b.x + b.w) * S), snap((b.y + b.h) * S));
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    inter / union
}

/// True iff `pred` overlaps `gold` strictly above the threshold.
pub fn correct_at_iou(pred: &Box, gold: &Box, threshold: f64) -> bool {
    iou(pred, gold) > threshold
}

/// Spatial-relation predicate on box centers, with a tie-excluding margin.
///
/// Same subject and object (equal centers) never satisfy any relation.
pub fn relation_holds(rel: RelationLabel, subject: &Box, object: &Box, margin: f64) -> bool {
    let (sx, sy) = subject.center();
    let (ox, oy) = object.center();
    match rel {
        RelationLabel::LeftOf => sx < ox - margin,
        RelationLabel::RightOf => sx > ox + margin,
        RelationLabel::Above => sy < oy - margin,
        RelationLabel::Below => sy > oy + margin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mk(x: f64, y: f64, w: f64, h: f64) -> Box {
        Box {
            id: 0,
            x,
            y,
            w,
            h,
            category: Category::Ball,
            color: Color::Red,
            size: SizeAttr::Small,
        }
    }

    #[test]
    fn identical_boxes_have_iou_one() {
        let b = mk(0.1, 0.2, 0.3, 0.4);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn disjoint_boxes_have_iou_zero() {
        let a = mk(0.0, 0.0, 0.2, 0.2);
        let b = mk(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn quarter_overlap_is_one_seventh() {
        // inter = 1 cell, union = 7 cells after scaling by 10
        let a = mk(0.0, 0.0, 0.2, 0.2);
        let b = mk(0.1, 0.1, 0.2, 0.2);
        let got = iou(&a, &b);
        assert_eq!(got, 1.0 / 7.0);
        assert!(!correct_at_iou(&a, &b, 0.5));
    }

    #[test]
    fn iou_is_symmetric() {
        let a = mk(0.05, 0.1, 0.4, 0.3);
        let b = mk(0.2, 0.15, 0.35, 0.5);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn grid_scaling_round_trips_exactly() {
        // round(100 * fl(k/100)) must recover k for every grid ordinate
        // and every grid sum, which is what makes iou() bit-equal to
        // cell counting.
        for k in 0..=10_000u32 {
            let x = k as f64 / 100.0;
            assert_eq!((x * 100.0).round(), k as f64);
        }
        for i in 0..=100u32 {
            for j in 0..=100 - i {
                let s = i as f64 / 100.0 + j as f64 / 100.0;
                assert_eq!((s * 100.0).round(), (i + j) as f64);
            }
        }
    }

    #[test]
    fn relation_predicates() {
        let left = mk(0.1, 0.4, 0.2, 0.2); // center x 0.2
        let right = mk(0.7, 0.4, 0.2, 0.2); // center x 0.8
        assert!(relation_holds(RelationLabel::LeftOf, &left, &right, 0.05));
        assert!(!relation_holds(RelationLabel::LeftOf, &right, &left, 0.05));
        assert!(relation_holds(RelationLabel::RightOf, &right, &left, 0.05));
        // same box: margin excludes ties
        for rel in RelationLabel::ALL {
            assert!(!relation_holds(rel, &left, &left, 0.0));
        }
    }

    #[test]
    fn margin_band_excludes_near_ties() {
        let a = mk(0.45, 0.4, 0.1, 0.2); // center x 0.50
        let b = mk(0.47, 0.4, 0.1, 0.2); // center x 0.52
        assert!(!relation_holds(RelationLabel::LeftOf, &a, &b, 0.05));
        assert!(!relation_holds(RelationLabel::RightOf, &b, &a, 0.05));
    }

    #[test]
    fn unknown_relation_label_errors() {
        assert!(RelationLabel::parse("behind").is_err());
        assert_eq!(
            RelationLabel::parse("left_of").unwrap(),
            RelationLabel::LeftOf
        );
    }
}
