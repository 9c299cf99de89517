//! Axis-aligned boxes in normalized image coordinates and their overlap.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Corner-form box `(x1, y1, x2, y2)` inside the unit square.
///
/// Construction enforces `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`; a box
/// with zero width or height cannot exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]", bound = "T: Scalar")]
pub struct BBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let (zero, one) = (T::zero(), T::one());
        let ok = [x1, y1, x2, y2].iter().all(|c| c.is_finite())
            && zero <= x1
            && x1 < x2
            && x2 <= one
            && zero <= y1
            && y1 < y2
            && y2 <= one;
        if ok {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(Error::InvalidBox {
                x1: x1.as_f64(),
                y1: y1.as_f64(),
                x2: x2.as_f64(),
                y2: y2.as_f64(),
            })
        }
    }

    pub fn x1(&self) -> T {
        self.x1
    }
    pub fn y1(&self) -> T {
        self.y1
    }
    pub fn x2(&self) -> T {
        self.x2
    }
    pub fn y2(&self) -> T {
        self.y2
    }

    pub fn corners(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x1: U::of(self.x1.as_f64()),
            y1: U::of(self.y1.as_f64()),
            x2: U::of(self.x2.as_f64()),
            y2: U::of(self.y2.as_f64()),
        }
    }

    /// Area of the rectangle shared with `other` (zero when disjoint).
    pub fn intersection_area(&self, other: &Self) -> T {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(T::zero());
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(T::zero());
        w * h
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    // union >= max(area) > 0 for valid boxes
    (inter / union).min(T::one()).max(T::zero())
}

impl<T: Scalar> From<BBox<T>> for [f64; 4] {
    fn from(b: BBox<T>) -> Self {
        [b.x1.as_f64(), b.y1.as_f64(), b.x2.as_f64(), b.y2.as_f64()]
    }
}

impl<T: Scalar> TryFrom<[f64; 4]> for BBox<T> {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(T::of(c[0]), T::of(c[1]), T::of(c[2]), T::of(c[3]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts grid-cell centers covered by each box.
    fn raster_iou(a: &BBox<f64>, c: &BBox<f64>, n: usize) -> f64 {
        let inside = |bx: &BBox<f64>, u: f64, v: f64| {
            u >= bx.x1() && u < bx.x2() && v >= bx.y1() && v < bx.y2()
        };
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..n {
            let u = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let v = (j as f64 + 0.5) / n as f64;
                let (p, q) = (inside(a, u, v), inside(c, u, v));
                inter += (p && q) as usize;
                union += (p || q) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn rejects_degenerate_and_out_of_range() {
        assert!(BBox::new(0.2, 0.1, 0.2, 0.5).is_err());
        assert!(BBox::new(0.1, 0.5, 0.3, 0.5).is_err());
        assert!(BBox::new(-0.1, 0.1, 0.3, 0.5).is_err());
        assert!(BBox::new(0.1, 0.1, 1.2, 0.5).is_err());
        assert!(BBox::new(0.5, 0.1, 0.3, 0.5).is_err());
        assert!(BBox::new(f64::NAN, 0.1, 0.3, 0.5).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn identical_boxes() {
        let a = b(0.1, 0.1, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn disjoint_boxes() {
        assert_eq!(iou(&b(0.0, 0.0, 0.4, 0.4), &b(0.6, 0.6, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn partial_overlap_matches_raster() {
        let a = b(0.0, 0.0, 0.2, 0.2);
        let c = b(0.1, 0.1, 0.3, 0.3);
        // intersection 0.01, union 0.07
        let oracle = raster_iou(&a, &c, 512);
        assert!((oracle - 1.0 / 7.0).abs() < 5e-3, "oracle {oracle}");
        assert!((iou(&a, &c) - 0.142857142857).abs() < 1e-9);
        assert!((iou(&a, &c) - oracle).abs() < 5e-3);
    }

    #[test]
    fn works_in_f32() {
        let a = BBox::<f32>::new(0.0, 0.0, 0.2, 0.2).unwrap();
        let c = BBox::<f32>::new(0.1, 0.1, 0.3, 0.3).unwrap();
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn serde_as_array() {
        let a = b(0.1, 0.2, 0.3, 0.4);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, "[0.1,0.2,0.3,0.4]");
        let back: BBox<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(a, back);
        assert!(serde_json::from_str::<BBox<f64>>("[0.3,0.2,0.1,0.4]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox<f64>> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| {
            let x2 = (x + w * (1.0 - x)).max(x + 1e-3).min(1.0);
            let y2 = (y + h * (1.0 - y)).max(y + 1e-3).min(1.0);
            BBox::new(x, y, x2, y2).unwrap()
        })
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            if a != c {
                prop_assert!(v < 1.0);
            }
        }

        #[test]
        fn translation_invariant(a in arb_box(), c in arb_box(), fx in 0.0..1.0f64, fy in 0.0..1.0f64) {
            let lo_x = -a.x1().min(c.x1());
            let hi_x = 1.0 - a.x2().max(c.x2());
            let lo_y = -a.y1().min(c.y1());
            let hi_y = 1.0 - a.y2().max(c.y2());
            let dx = lo_x + fx * (hi_x - lo_x);
            let dy = lo_y + fy * (hi_y - lo_y);
            let shift = |bx: &BBox<f64>| BBox::new(
                (bx.x1() + dx).max(0.0), (bx.y1() + dy).max(0.0),
                (bx.x2() + dx).min(1.0), (bx.y2() + dy).min(1.0)).unwrap();
            prop_assert!((iou(&a, &c) - iou(&shift(&a), &shift(&c))).abs() < 1e-12);
        }
    }
}
