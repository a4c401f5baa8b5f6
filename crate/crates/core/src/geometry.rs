//! Box and phrase overlap measures.
//!
//! Everything is plain `f64` arithmetic on normalized coordinates with no
//! epsilon inside the IOU formulas.

use thiserror::Error;

use crate::data::{BoxXYXY, PhraseSpans, RecordError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("cannot merge an empty box list")]
    EmptyInput,
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Box in center/size form, the parameterization used by anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCXCYWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCXCYWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, RecordError> {
        let raw = [cx, cy, w, h];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(RecordError::BoxOutOfRange(raw));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(RecordError::DegenerateBox(raw));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_array(raw: [f64; 4]) -> Self {
        Self {
            cx: raw[0],
            cy: raw[1],
            w: raw[2],
            h: raw[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corner form without range checks.
    pub fn corners(&self) -> [f64; 4] {
        cxcywh_to_corners(self.to_array())
    }

    /// Corner form clipped to the unit square. Fails if the clipped box is
    /// degenerate.
    pub fn to_xyxy(&self) -> Result<BoxXYXY, RecordError> {
        let [x1, y1, x2, y2] = self.corners();
        BoxXYXY::new(
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
            x2.clamp(0.0, 1.0),
            y2.clamp(0.0, 1.0),
        )
    }
}

impl From<BoxXYXY> for BoxCXCYWH {
    fn from(b: BoxXYXY) -> Self {
        Self {
            cx: (b.x1 + b.x2) / 2.0,
            cy: (b.y1 + b.y2) / 2.0,
            w: b.x2 - b.x1,
            h: b.y2 - b.y1,
        }
    }
}

pub(crate) fn cxcywh_to_corners(b: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = b;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

fn enclosing_area(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]))
}

pub(crate) fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    inter / union
}

pub(crate) fn giou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let hull = enclosing_area(a, b);
    inter / union - (hull - union) / hull
}

pub fn box_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    iou_corners(&a.to_array(), &b.to_array())
}

/// Generalized IOU: `IOU - |C \ (A ∪ B)| / |C|` with `C` the tightest
/// enclosing box.
pub fn box_giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    giou_corners(&a.to_array(), &b.to_array())
}

/// Sum of absolute coordinate differences in center/size space.
pub fn box_l1(a: &BoxCXCYWH, b: &BoxCXCYWH) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Token-set IOU. Two empty phrases score 0.
pub fn phrase_iou(a: &PhraseSpans, b: &PhraseSpans) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// `sqrt(box IOU) * phrase IOU`.
pub fn dual_iou_from_components(box_iou: f64, phrase_iou: f64) -> f64 {
    box_iou.sqrt() * phrase_iou
}

pub fn dual_iou(
    box_a: &BoxXYXY,
    phrase_a: &PhraseSpans,
    box_b: &BoxXYXY,
    phrase_b: &PhraseSpans,
) -> f64 {
    dual_iou_from_components(box_iou(box_a, box_b), phrase_iou(phrase_a, phrase_b))
}

/// Tightest box containing every input box.
pub fn merge_boxes(boxes: &[BoxXYXY]) -> Result<BoxXYXY, GeometryError> {
    let (first, rest) = boxes.split_first().ok_or(GeometryError::EmptyInput)?;
    let merged = rest.iter().fold(*first, |acc, b| BoxXYXY {
        x1: acc.x1.min(b.x1),
        y1: acc.y1.min(b.y1),
        x2: acc.x2.max(b.x2),
        y2: acc.y2.max(b.y2),
    });
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
        BoxXYXY::new(x1, y1, x2, y2).unwrap()
    }

    fn span(s: usize, e: usize) -> PhraseSpans {
        PhraseSpans::new(&[(s, e)], 10).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 0.2, 0.2);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &b(0.5, 0.5, 0.9, 0.9)), 0.0);
        let iou = box_iou(&a, &b(0.1, 0.1, 0.3, 0.3));
        assert!((iou - 1.0 / 7.0).abs() < 1e-12, "{iou}");
    }

    #[test]
    fn giou_examples() {
        let a = b(0.0, 0.0, 0.1, 0.1);
        assert_eq!(box_giou(&a, &a), 1.0);
        let g = box_giou(&a, &b(0.2, 0.0, 0.3, 0.1));
        assert!((g + 1.0 / 3.0).abs() < 1e-12, "{g}");
    }

    #[test]
    fn l1_examples() {
        let a = BoxCXCYWH::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert_eq!(box_l1(&a, &a), 0.0);
        let shifted = BoxCXCYWH::new(0.6, 0.5, 0.2, 0.2).unwrap();
        assert!((box_l1(&a, &shifted) - 0.1).abs() < 1e-12);
        let other = BoxCXCYWH::new(0.4, 0.6, 0.3, 0.1).unwrap();
        assert!((box_l1(&a, &other) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn phrase_iou_examples() {
        assert_eq!(phrase_iou(&span(2, 5), &span(2, 5)), 1.0);
        assert_eq!(phrase_iou(&span(2, 5), &span(4, 6)), 0.25);
        assert_eq!(phrase_iou(&span(0, 2), &span(3, 6)), 0.0);
        assert_eq!(
            phrase_iou(&PhraseSpans::empty(), &PhraseSpans::empty()),
            0.0
        );
    }

    #[test]
    fn dual_iou_examples() {
        assert_eq!(dual_iou_from_components(1.0, 1.0), 1.0);
        assert_eq!(dual_iou_from_components(0.25, 0.5), 0.25);
        assert_eq!(dual_iou_from_components(0.8, 0.0), 0.0);
        let a = b(0.0, 0.0, 0.5, 0.5);
        assert_eq!(dual_iou(&a, &span(0, 2), &a, &span(0, 2)), 1.0);
    }

    #[test]
    fn merge_examples() {
        let a = b(0.0, 0.0, 0.2, 0.2);
        assert_eq!(merge_boxes(&[a]).unwrap(), a);
        assert_eq!(
            merge_boxes(&[a, b(0.5, 0.5, 1.0, 1.0)]).unwrap(),
            b(0.0, 0.0, 1.0, 1.0)
        );
        let outer = b(0.1, 0.1, 0.9, 0.9);
        assert_eq!(merge_boxes(&[b(0.2, 0.2, 0.3, 0.3), outer]).unwrap(), outer);
        assert_eq!(merge_boxes(&[]), Err(GeometryError::EmptyInput));
    }

    #[test]
    fn conversion_round_trip() {
        let a = b(0.13, 0.27, 0.61, 0.99);
        let c = BoxCXCYWH::from(a);
        let back = c.to_xyxy().unwrap();
        for (x, y) in a.to_array().iter().zip(back.to_array().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn arb_box() -> impl Strategy<Value = BoxXYXY> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| {
            let x2 = (x + w).min(1.0);
            let y2 = (y + h).min(1.0);
            BoxXYXY::new(x, y, x2.max(x + 1e-3), y2.max(y + 1e-3)).unwrap()
        })
    }

    fn arb_phrase() -> impl Strategy<Value = PhraseSpans> {
        proptest::collection::vec(any::<bool>(), 8).prop_map(|m| PhraseSpans::from_mask(&m))
    }

    proptest! {
        #[test]
        fn symmetry_and_bounds(a in arb_box(), b in arb_box(), p in arb_phrase(), q in arb_phrase()) {
            let iou = box_iou(&a, &b);
            let giou = box_giou(&a, &b);
            prop_assert_eq!(iou, box_iou(&b, &a));
            prop_assert_eq!(giou, box_giou(&b, &a));
            prop_assert_eq!(phrase_iou(&p, &q), phrase_iou(&q, &p));
            prop_assert_eq!(dual_iou(&a, &p, &b, &q), dual_iou(&b, &q, &a, &p));
            prop_assert!((0.0..=1.0).contains(&iou));
            prop_assert!((-1.0..=1.0).contains(&giou));
            // Nested boxes give hull == union up to rounding.
            prop_assert!(giou <= iou + 1e-15);
            let d = dual_iou(&a, &p, &b, &q);
            prop_assert!((0.0..=1.0).contains(&d));
            // Threshold semantics: a dual IOU above t forces a phrase IOU above t.
            prop_assert!(phrase_iou(&p, &q) >= d);
        }

        #[test]
        fn dual_iou_monotone(bi in 0.0..1.0f64, pi in 0.0..1.0f64, db in 0.0..1.0f64, dp in 0.0..1.0f64) {
            let base = dual_iou_from_components(bi, pi);
            prop_assert!(dual_iou_from_components((bi + db).min(1.0), pi) >= base);
            prop_assert!(dual_iou_from_components(bi, (pi + dp).min(1.0)) >= base);
        }

        #[test]
        fn merge_contains_inputs(boxes in proptest::collection::vec(arb_box(), 1..6)) {
            let m = merge_boxes(&boxes).unwrap();
            for b in &boxes {
                prop_assert!(m.contains(b));
            }
        }
    }
}
