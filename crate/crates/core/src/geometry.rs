//! Axis-aligned box arithmetic: IoU, ground-truth proposal assignment and the
//! AP50 hit rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in pixel coordinates, serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        // Negated comparisons also reject NaN coordinates.
        if !(x_max > x_min && y_max > y_min)
            || !(x_min.is_finite() && y_min.is_finite())
            || !(x_max.is_finite() && y_max.is_finite())
        {
            return Err(Error::DegenerateBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
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

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Shifts the box by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Both boxes are well-formed by construction, so the
/// union is strictly positive.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Index of the box with maximal IoU against `gt`, if that IoU reaches
/// `min_iou`. Ties go to the lowest index.
pub fn assign_gt_index<'a, I>(boxes: I, gt: &BoundingBox, min_iou: f64) -> Option<usize>
where
    I: IntoIterator<Item = &'a BoundingBox>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.into_iter().enumerate() {
        let v = iou(b, gt);
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.filter(|&(_, v)| v >= min_iou).map(|(i, _)| i)
}

/// AP50 hit rule. `strict` selects `IoU > 0.5`; otherwise `IoU >= 0.5`.
pub fn hit_at_50_with(predicted: &BoundingBox, gt: &BoundingBox, strict: bool) -> bool {
    let v = iou(predicted, gt);
    if strict {
        v > 0.5
    } else {
        v >= 0.5
    }
}

/// Strict AP50 hit: `IoU(predicted, gt) > 0.5`.
pub fn hit_at_50(predicted: &BoundingBox, gt: &BoundingBox) -> bool {
    hit_at_50_with(predicted, gt, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    /// Counts unit cells of an integer grid covered by each box.
    fn raster_iou(a: [i64; 4], b: [i64; 4]) -> (u64, u64) {
        let lo_x = a[0].min(b[0]);
        let hi_x = a[2].max(b[2]);
        let lo_y = a[1].min(b[1]);
        let hi_y = a[3].max(b[3]);
        let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
        let (mut inter, mut union) = (0, 0);
        for x in lo_x..hi_x {
            for y in lo_y..hi_y {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
            }
        }
        (inter, union)
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = bx(3.5, 1.0, 10.25, 7.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn shifted_square_matches_raster_count() {
        let (inter, union) = raster_iou([0, 0, 2, 2], [1, 1, 3, 3]);
        assert_eq!((inter, union), (1, 7));
        assert_eq!(
            iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0)),
            1.0 / 7.0
        );
    }

    #[test]
    fn hit_rule_is_strict_at_one_half() {
        let a = bx(0.0, 0.0, 2.0, 1.0);
        let b = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(raster_iou([0, 0, 2, 1], [0, 0, 1, 1]), (1, 2));
        assert_eq!(iou(&a, &b), 0.5);
        assert!(!hit_at_50(&a, &b));
        assert!(hit_at_50_with(&a, &b, false));
        assert!(hit_at_50(&a, &a));
        assert!(!hit_at_50(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0)));
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[0,0,-1,1]").is_err());
    }

    #[test]
    fn assignment_picks_exact_match() {
        let gt = bx(10.0, 10.0, 20.0, 20.0);
        let boxes = [
            bx(0.0, 0.0, 5.0, 5.0),
            bx(30.0, 30.0, 40.0, 40.0),
            bx(12.0, 12.0, 22.0, 22.0),
            gt,
        ];
        assert_eq!(assign_gt_index(&boxes, &gt, 0.5), Some(3));
    }

    #[test]
    fn assignment_rejects_below_threshold() {
        let gt = bx(10.0, 10.0, 20.0, 20.0);
        let boxes = [bx(0.0, 0.0, 5.0, 5.0), bx(30.0, 30.0, 40.0, 40.0)];
        assert_eq!(assign_gt_index(&boxes, &gt, 0.5), None);
    }

    #[test]
    fn assignment_ties_go_to_lowest_index() {
        let gt = bx(10.0, 10.0, 20.0, 20.0);
        let near = bx(11.0, 11.0, 21.0, 21.0);
        let boxes = [bx(0.0, 0.0, 5.0, 5.0), near, near];
        assert_eq!(assign_gt_index(&boxes, &gt, 0.5), Some(1));
    }

    fn int_box() -> impl Strategy<Value = [i64; 4]> {
        (-20i64..20, -20i64..20, 1i64..15, 1i64..15).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
    }

    fn real_box() -> impl Strategy<Value = BoundingBox> {
        (
            -500.0f64..500.0,
            -500.0f64..500.0,
            0.01f64..300.0,
            0.01f64..300.0,
        )
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn integer_iou_equals_raster_ratio(a in int_box(), b in int_box()) {
            let (inter, union) = raster_iou(a, b);
            let fa = bx(a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64);
            let fb = bx(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
            prop_assert_eq!(iou(&fa, &fb), inter as f64 / union as f64);
        }

        #[test]
        fn iou_is_bounded_and_symmetric(a in real_box(), b in real_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }

        #[test]
        fn assignment_is_permutation_equivariant(
            boxes in proptest::collection::vec(int_box(), 1..12),
            gt in int_box(),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let to_box = |r: &[i64; 4]| bx(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64);
            let boxes: Vec<BoundingBox> = boxes.iter().map(to_box).collect();
            let gt = to_box(&gt);
            let mut perm: Vec<usize> = (0..boxes.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<BoundingBox> = perm.iter().map(|&i| boxes[i]).collect();

            let original = assign_gt_index(&boxes, &gt, 0.0);
            let shuffled = assign_gt_index(&permuted, &gt, 0.0);
            match (original, shuffled) {
                (Some(i), Some(j)) => prop_assert_eq!(iou(&boxes[i], &gt), iou(&boxes[perm[j]], &gt)),
                (o, s) => prop_assert_eq!(o.is_some(), s.is_some()),
            }
            if let Some(j) = shuffled {
                let best = iou(&permuted[j], &gt);
                prop_assert!(permuted[..j].iter().all(|b| iou(b, &gt) < best));
            }
        }
    }
}
