//! Axis-aligned rectangle arithmetic in continuous pixel coordinates.
//!
//! `x` grows to the right and `y` grows downwards. A box is the closed set
//! `[x_min, x_max] x [y_min, y_max]`; areas are Lebesgue measure, so
//! zero-width or zero-height boxes have area zero.

use serde::{Deserialize, Serialize};

/// Default relative tolerance for [`is_fully_covered`].
pub const DEFAULT_COVER_REL_TOL: f64 = 1e-9;

/// Axis-aligned bounding box in corner form.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// How a scalar margin is turned into per-side offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// Margins are pixels.
    Additive,
    /// Margins are fractions of the box width (x sides) and height (y sides).
    Multiplicative,
}

impl MarginMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MarginMode::Additive => "additive",
            MarginMode::Multiplicative => "multiplicative",
        }
    }
}

impl std::str::FromStr for MarginMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "additive" => Ok(MarginMode::Additive),
            "multiplicative" => Ok(MarginMode::Multiplicative),
            other => Err(format!("unknown margin mode {other:?}")),
        }
    }
}

impl From<[f64; 4]> for BBox {
    fn from(c: [f64; 4]) -> Self {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    /// Builds a box without validation; see [`BBox::validate`].
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Converts a COCO-style `[x, y, width, height]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Checks that all coordinates are finite and the corners are ordered.
    pub fn validate(&self) -> Result<(), String> {
        let c = self.to_array();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(format!("non-finite coordinate in {c:?}"));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(format!(
                "inverted box {c:?} (need x_min <= x_max and y_min <= y_max)"
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox::new(
            self.x_min * s,
            self.y_min * s,
            self.x_max * s,
            self.y_max * s,
        )
    }

    /// Intersection with `other`, or `None` if the boxes do not overlap
    /// (touching edges yield a degenerate box).
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_min <= x_max && y_min <= y_max).then(|| BBox::new(x_min, y_min, x_max, y_max))
    }

    /// `true` iff `inner` lies inside `self` (boundaries inclusive).
    pub fn contains(&self, inner: &BBox) -> bool {
        self.x_min <= inner.x_min
            && self.y_min <= inner.y_min
            && self.x_max >= inner.x_max
            && self.y_max >= inner.y_max
    }
}

pub fn area(b: &BBox) -> f64 {
    (b.x_max - b.x_min).max(0.0) * (b.y_max - b.y_min).max(0.0)
}

/// Intersection over union; `0` for disjoint boxes and when both areas are zero.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Moves each side outwards by its own offset, ordered
/// `[x_min, y_min, x_max, y_max]`. Negative offsets shrink the box; an axis
/// that would invert collapses to its midpoint.
pub fn inflate_sides(b: &BBox, offsets: [f64; 4]) -> BBox {
    let mut x_min = b.x_min - offsets[0];
    let mut y_min = b.y_min - offsets[1];
    let mut x_max = b.x_max + offsets[2];
    let mut y_max = b.y_max + offsets[3];
    if x_min > x_max {
        let mid = 0.5 * (x_min + x_max);
        x_min = mid;
        x_max = mid;
    }
    if y_min > y_max {
        let mid = 0.5 * (y_min + y_max);
        y_min = mid;
        y_max = mid;
    }
    BBox::new(x_min, y_min, x_max, y_max)
}

/// Per-side pixel offsets for per-coordinate margins under `mode`.
///
/// Multiplicative margins scale the x sides by the box width and the y sides
/// by its height. A zero extent contributes a zero offset, so infinite margins
/// never produce NaN.
pub fn side_offsets(b: &BBox, margins: [f64; 4], mode: MarginMode) -> [f64; 4] {
    match mode {
        MarginMode::Additive => margins,
        MarginMode::Multiplicative => {
            let w = b.width();
            let h = b.height();
            let scaled = |extent: f64, m: f64| if extent == 0.0 { 0.0 } else { extent * m };
            [
                scaled(w, margins[0]),
                scaled(h, margins[1]),
                scaled(w, margins[2]),
                scaled(h, margins[3]),
            ]
        }
    }
}

/// Inflates by one scalar margin on every side.
pub fn inflate(b: &BBox, margin: f64, mode: MarginMode) -> BBox {
    inflate_per_side(b, [margin; 4], mode)
}

/// Inflates by per-coordinate margins `[x_min, y_min, x_max, y_max]`.
pub fn inflate_per_side(b: &BBox, margins: [f64; 4], mode: MarginMode) -> BBox {
    inflate_sides(b, side_offsets(b, margins, mode))
}

/// Exact area of `gt ∩ (∪ preds)` by coordinate compression.
///
/// Each prediction is clipped to `gt`; the distinct clipped x and y edges cut
/// `gt` into cells, and a cell is counted when some clipped prediction spans it.
pub fn covered_area(gt: &BBox, preds: &[BBox]) -> f64 {
    let clipped: Vec<BBox> = preds
        .iter()
        .filter_map(|p| p.intersection(gt))
        .filter(|c| c.area() > 0.0)
        .collect();
    if clipped.is_empty() {
        return 0.0;
    }

    let mut xs: Vec<f64> = clipped.iter().flat_map(|c| [c.x_min, c.x_max]).collect();
    let mut ys: Vec<f64> = clipped.iter().flat_map(|c| [c.y_min, c.y_max]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();

    let nx = xs.len() - 1;
    let ny = ys.len() - 1;
    let mut marked = vec![false; nx * ny];
    let index = |edges: &[f64], v: f64| edges.partition_point(|&e| e < v);
    for c in &clipped {
        let (i0, i1) = (index(&xs, c.x_min), index(&xs, c.x_max));
        let (j0, j1) = (index(&ys, c.y_min), index(&ys, c.y_max));
        for j in j0..j1 {
            marked[j * nx + i0..j * nx + i1].fill(true);
        }
    }

    let mut total = 0.0;
    for j in 0..ny {
        let dy = ys[j + 1] - ys[j];
        let row: f64 = (0..nx)
            .filter(|&i| marked[j * nx + i])
            .map(|i| xs[i + 1] - xs[i])
            .sum();
        total += row * dy;
    }
    total.min(gt.area())
}

/// `true` iff the union of `preds` covers `gt` up to a relative area tolerance.
/// A zero-area ground truth is vacuously covered.
pub fn is_fully_covered(gt: &BBox, preds: &[BBox], rel_tol: f64) -> bool {
    let a = gt.area();
    if a <= 0.0 {
        return true;
    }
    // A single containing box is the common case and needs no area arithmetic.
    if preds.iter().any(|p| p.contains(gt)) {
        return true;
    }
    covered_area(gt, preds) >= (1.0 - rel_tol) * a
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    /// Counts unit cells of the integer grid inside `gt` and some pred.
    fn raster_count(gt: &BBox, preds: &[BBox]) -> f64 {
        let mut count = 0u64;
        for y in gt.y_min as i64..gt.y_max as i64 {
            for x in gt.x_min as i64..gt.x_max as i64 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                if preds
                    .iter()
                    .any(|p| p.x_min <= cx && cx <= p.x_max && p.y_min <= cy && cy <= p.y_max)
                {
                    count += 1;
                }
            }
        }
        count as f64
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&b(0.0, 0.0, 10.0, 10.0)), 100.0);
        assert_eq!(area(&b(5.0, 5.0, 5.0, 9.0)), 0.0);
        assert_eq!(area(&b(0.0, 0.0, 1280.0, 720.0)), 921_600.0);
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &b(5.0, 5.0, 15.0, 15.0)) - 25.0 / 175.0).abs() < 1e-12);
        let p = b(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn inflate_examples() {
        let r = b(0.0, 0.0, 10.0, 20.0);
        assert_eq!(
            inflate(&r, 5.0, MarginMode::Additive),
            b(-5.0, -5.0, 15.0, 25.0)
        );
        assert_eq!(inflate(&r, 0.0, MarginMode::Additive), r);
        assert_eq!(
            inflate(&r, 0.1, MarginMode::Multiplicative),
            b(-1.0, -2.0, 11.0, 22.0)
        );
    }

    #[test]
    fn negative_margin_collapses_instead_of_inverting() {
        let r = b(0.0, 0.0, 10.0, 20.0);
        let s = inflate(&r, -8.0, MarginMode::Additive);
        assert_eq!(s, b(5.0, 8.0, 5.0, 12.0));
        assert!(s.validate().is_ok());
    }

    #[test]
    fn infinite_margin_on_degenerate_box_is_not_nan() {
        let r = b(1.0, 1.0, 1.0, 5.0);
        let s = inflate(&r, f64::INFINITY, MarginMode::Multiplicative);
        assert_eq!((s.x_min, s.x_max), (1.0, 1.0));
        assert_eq!((s.y_min, s.y_max), (f64::NEG_INFINITY, f64::INFINITY));
    }

    #[test]
    fn covered_area_examples() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let halves = [b(0.0, 0.0, 6.0, 10.0), b(4.0, 0.0, 10.0, 10.0)];
        assert_eq!(raster_count(&gt, &halves), 100.0);
        assert_eq!(covered_area(&gt, &halves), 100.0);
        assert_eq!(covered_area(&gt, &[]), 0.0);
        assert_eq!(covered_area(&gt, &[b(0.0, 0.0, 10.0, 5.0)]), 50.0);
    }

    #[test]
    fn covered_area_with_infinite_pred() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let inf = b(
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::INFINITY,
        );
        assert_eq!(covered_area(&gt, &[inf]), 100.0);
    }

    #[test]
    fn full_cover_examples() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let halves = [b(0.0, 0.0, 6.0, 10.0), b(4.0, 0.0, 10.0, 10.0)];
        assert!(is_fully_covered(&gt, &halves, DEFAULT_COVER_REL_TOL));
        assert!(!is_fully_covered(
            &gt,
            &[b(0.0, 0.0, 10.0, 9.99)],
            DEFAULT_COVER_REL_TOL
        ));
        assert!(is_fully_covered(&gt, &[gt], DEFAULT_COVER_REL_TOL));
        assert!(is_fully_covered(
            &b(3.0, 3.0, 3.0, 8.0),
            &[],
            DEFAULT_COVER_REL_TOL
        ));
    }

    #[test]
    fn validate_rejects_bad_boxes() {
        assert!(b(20.0, 20.0, 10.0, 10.0).validate().is_err());
        assert!(b(0.0, f64::NAN, 1.0, 1.0).validate().is_err());
        assert!(b(0.0, 0.0, 0.0, 0.0).validate().is_ok());
    }

    fn int_box(max: i32) -> impl Strategy<Value = BBox> {
        (0..=max, 0..=max, 0..=max, 0..=max).prop_map(|(a, b, c, d)| {
            BBox::new(
                a.min(c) as f64,
                b.min(d) as f64,
                a.max(c) as f64,
                b.max(d) as f64,
            )
        })
    }

    fn real_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
    }

    proptest! {
        #[test]
        fn covered_area_matches_raster(gt in int_box(24), preds in prop::collection::vec(int_box(24), 0..6)) {
            prop_assert_eq!(covered_area(&gt, &preds), raster_count(&gt, &preds));
        }

        #[test]
        fn covered_area_bounded_and_monotone(
            gt in real_box(),
            preds in prop::collection::vec(real_box(), 0..6),
            extra in real_box(),
            m in 0.0..5.0f64,
        ) {
            let base = covered_area(&gt, &preds);
            prop_assert!(base >= 0.0 && base <= gt.area());
            let mut appended = preds.clone();
            appended.push(extra);
            prop_assert!(covered_area(&gt, &appended) >= base - 1e-9 * gt.area().max(1.0));
            let inflated: Vec<BBox> = preds.iter().map(|p| inflate(p, m, MarginMode::Additive)).collect();
            prop_assert!(covered_area(&gt, &inflated) >= base - 1e-9 * gt.area().max(1.0));
        }

        #[test]
        fn iou_symmetric_and_bounded(a in real_box(), c in real_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            if a.area() > 0.0 {
                prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn inflate_monotone(r in real_box(), m1 in -3.0..10.0f64, dm in 0.0..10.0f64, mult in any::<bool>()) {
            let mode = if mult { MarginMode::Multiplicative } else { MarginMode::Additive };
            let small = inflate(&r, m1.max(0.0), mode);
            let large = inflate(&r, m1.max(0.0) + dm, mode);
            prop_assert!(large.contains(&small));
        }
    }
}
