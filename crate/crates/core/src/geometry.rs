//! Axis-aligned boxes and the crop/resize/flip maps between augmented views.
//!
//! Boxes use continuous, half-open pixel coordinates: a pixel with integer
//! index `(i, j)` covers `[j, j+1) x [i, i+1)` and has its center at
//! `(j + 0.5, i + 0.5)`.

use crate::{Error, Result};

/// Axis-aligned rectangle `[x1, x2) x [y1, y2)` in some view's pixel frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and empty extents.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::DegenerateBox(alloc::format!("{x1}, {y1}, {x2}, {y2}")))
        }
    }

    /// Box from its top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x1: x, y1: y, x2: x + w, y2: y + h }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
            x2: self.x2.min(other.x2),
            y2: self.y2.min(other.y2),
        };
        (b.x1 < b.x2 && b.y1 < b.y2).then_some(b)
    }

    /// True when `other` lies entirely inside `self`, with `tol` slack.
    pub fn contains(&self, other: &BBox, tol: f64) -> bool {
        other.x1 >= self.x1 - tol
            && other.y1 >= self.y1 - tol
            && other.x2 <= self.x2 + tol
            && other.y2 <= self.y2 + tol
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Largest coordinate difference to `other`.
    pub fn max_abs_diff(&self, other: &BBox) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `(x2 - x1) * (y2 - y1)`.
pub fn area(b: &BBox) -> f64 {
    (b.x2 - b.x1) * (b.y2 - b.y1)
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    match a.intersection(b) {
        None => 0.0,
        Some(inter) => {
            let i = area(&inter);
            i / (area(a) + area(b) - i)
        }
    }
}

/// Random-resized-crop style view: a crop of the original image, resized to
/// `out_width x out_height`, optionally mirrored horizontally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    /// The crop, in original-image coordinates.
    pub source_rect: BBox,
    pub out_width: usize,
    pub out_height: usize,
    pub hflip: bool,
}

impl ViewTransform {
    pub fn new(source_rect: BBox, out_width: usize, out_height: usize, hflip: bool) -> Self {
        ViewTransform { source_rect, out_width, out_height, hflip }
    }

    /// Output pixels per original pixel, horizontally.
    pub fn scale_x(&self) -> f64 {
        self.out_width as f64 / self.source_rect.width()
    }

    pub fn scale_y(&self) -> f64 {
        self.out_height as f64 / self.source_rect.height()
    }

    /// The whole view, `(0, 0, out_width, out_height)`.
    pub fn view_rect(&self) -> BBox {
        BBox { x1: 0.0, y1: 0.0, x2: self.out_width as f64, y2: self.out_height as f64 }
    }

    pub fn orig_to_view_x(&self, x: f64) -> f64 {
        let v = (x - self.source_rect.x1) * self.scale_x();
        if self.hflip {
            self.out_width as f64 - v
        } else {
            v
        }
    }

    pub fn orig_to_view_y(&self, y: f64) -> f64 {
        (y - self.source_rect.y1) * self.scale_y()
    }

    pub fn view_to_orig_x(&self, x: f64) -> f64 {
        let v = if self.hflip { self.out_width as f64 - x } else { x };
        self.source_rect.x1 + v / self.scale_x()
    }

    pub fn view_to_orig_y(&self, y: f64) -> f64 {
        self.source_rect.y1 + y / self.scale_y()
    }

    /// Maps a box in original-image coordinates into this view.
    pub fn orig_to_view(&self, b: &BBox) -> BBox {
        let (xa, xb) = (self.orig_to_view_x(b.x1), self.orig_to_view_x(b.x2));
        BBox {
            x1: xa.min(xb),
            y1: self.orig_to_view_y(b.y1),
            x2: xa.max(xb),
            y2: self.orig_to_view_y(b.y2),
        }
    }

    /// Maps a box in this view's coordinates back to the original image.
    pub fn view_to_orig(&self, b: &BBox) -> BBox {
        let (xa, xb) = (self.view_to_orig_x(b.x1), self.view_to_orig_x(b.x2));
        BBox {
            x1: xa.min(xb),
            y1: self.view_to_orig_y(b.y1),
            x2: xa.max(xb),
            y2: self.view_to_orig_y(b.y2),
        }
    }
}

/// The region both views see, in view-`a` pixel coordinates, or `None` when
/// the two crops do not intersect.
pub fn overlap_in_view(a: &ViewTransform, b: &ViewTransform) -> Option<BBox> {
    a.source_rect
        .intersection(&b.source_rect)
        .map(|shared| a.orig_to_view(&shared))
}

/// Re-expresses a box given in `from`-view coordinates in `to`-view
/// coordinates. The result may extend past the `to` view.
pub fn project_box(b: &BBox, from: &ViewTransform, to: &ViewTransform) -> BBox {
    to.orig_to_view(&from.view_to_orig(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::try_new(x1, y1, x2, y2).unwrap()
    }

    /// Fraction of grid cells covered, by rasterizing on a fine lattice.
    fn raster_iou(a: &BBox, b: &BBox, cell: f64) -> f64 {
        let (lo_x, hi_x) = (a.x1.min(b.x1), a.x2.max(b.x2));
        let (lo_y, hi_y) = (a.y1.min(b.y1), a.y2.max(b.y2));
        let nx = ((hi_x - lo_x) / cell).round() as usize;
        let ny = ((hi_y - lo_y) / cell).round() as usize;
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..ny {
            for j in 0..nx {
                let x = lo_x + (j as f64 + 0.5) * cell;
                let y = lo_y + (i as f64 + 0.5) * cell;
                let ia = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
                let ib = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&bx(0.0, 0.0, 10.0, 10.0)), 100.0);
        assert_eq!(area(&bx(2.0, 3.0, 2.5, 4.0)), 0.5);
        assert_eq!(area(&bx(0.0, 0.0, 1.0, 1.0)), 1.0);
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = bx(5.0, 5.0, 15.0, 15.0);
        let oracle = raster_iou(&a, &b, 0.05);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-9, "raster oracle {oracle}");
        assert!((iou(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::try_new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::try_new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(BBox::try_new(0.0, 3.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn overlap_identical_and_disjoint() {
        let t = ViewTransform::new(bx(10.0, 20.0, 110.0, 70.0), 224, 224, true);
        let full = overlap_in_view(&t, &t).unwrap();
        assert!(full.max_abs_diff(&t.view_rect()) < 1e-9);
        let u = ViewTransform::new(bx(200.0, 200.0, 300.0, 300.0), 224, 224, false);
        assert!(overlap_in_view(&t, &u).is_none());
    }

    /// Per-pixel oracle: a view pixel is in the overlap iff its center maps
    /// into both crops.
    #[test]
    fn half_overlap_covers_half_the_view() {
        let a = ViewTransform::new(bx(0.0, 0.0, 64.0, 64.0), 64, 64, false);
        let b = ViewTransform::new(bx(32.0, 0.0, 96.0, 64.0), 64, 64, false);
        let ov = overlap_in_view(&a, &b).unwrap();
        assert!(ov.max_abs_diff(&bx(32.0, 0.0, 64.0, 64.0)) < 1e-12);
        let mut inside = 0;
        for i in 0..64 {
            for j in 0..64 {
                let (xo, yo) = (a.view_to_orig_x(j as f64 + 0.5), a.view_to_orig_y(i as f64 + 0.5));
                let s = &b.source_rect;
                let in_b = xo >= s.x1 && xo < s.x2 && yo >= s.y1 && yo < s.y2;
                let in_ov = (j as f64 + 0.5) >= ov.x1 && (j as f64 + 0.5) < ov.x2;
                assert_eq!(in_b, in_ov);
                inside += in_b as usize;
            }
        }
        assert_eq!(inside, 64 * 32);
    }

    #[test]
    fn projection_through_flip() {
        let crop = bx(0.0, 0.0, 224.0, 224.0);
        let from = ViewTransform::new(crop, 224, 224, false);
        let to = ViewTransform::new(crop, 224, 224, true);
        let b = bx(10.0, 20.0, 42.0, 52.0);
        let p = project_box(&b, &from, &to);
        assert!(p.max_abs_diff(&bx(182.0, 20.0, 214.0, 52.0)) < 1e-12);
        // corner-wise oracle: x' = 224 - x, then reorder
        let xs = [224.0 - b.x1, 224.0 - b.x2];
        assert_eq!(p.x1, xs[0].min(xs[1]));
        assert_eq!(p.x2, xs[0].max(xs[1]));
        assert!(p.is_valid());
    }

    #[test]
    fn projection_identity() {
        let t = ViewTransform::new(bx(13.0, 7.5, 140.0, 99.0), 96, 96, true);
        let b = bx(3.0, 4.0, 50.5, 60.0);
        assert!(project_box(&b, &t, &t).max_abs_diff(&b) < 1e-12);
    }

    fn arb_transform() -> impl Strategy<Value = ViewTransform> {
        (0.0..400.0f64, 0.0..400.0f64, 8.0..400.0f64, 8.0..400.0f64, 16usize..300, 16usize..300, any::<bool>())
            .prop_map(|(x, y, w, h, ow, oh, f)| ViewTransform::new(BBox::from_xywh(x, y, w, h), ow, oh, f))
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..300.0f64, -50.0..300.0f64, 0.5..200.0f64, 0.5..200.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn projection_round_trip(b in arb_box(), k in arb_transform(), q in arb_transform()) {
            let back = project_box(&project_box(&b, &k, &q), &q, &k);
            prop_assert!(back.max_abs_diff(&b) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn projection_scales_area(b in arb_box(), k in arb_transform(), q in arb_transform()) {
            let p = project_box(&b, &k, &q);
            prop_assert!(p.is_valid());
            let expect = (q.scale_x() / k.scale_x()) * (q.scale_y() / k.scale_y());
            let ratio = p.area() / b.area();
            prop_assert!((ratio / expect - 1.0).abs() < 1e-6);
        }
    }
}
