use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates, `(x_min, y_min, x_max, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            self.width() * self.height()
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x_max > self.x_min && self.y_max > self.y_min)
    }

    /// Non-degenerate, finite and inside `[0, width] x [0, height]`.
    pub fn is_valid_in(&self, width: f64, height: f64) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && !self.is_degenerate()
            && self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width
            && self.y_max <= height
    }

    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    /// Whether the pixel with integer coordinates `(x, y)` has its center
    /// inside the box.
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        px >= self.x_min && px < self.x_max && py >= self.y_min && py < self.y_max
    }

    pub fn coord(&self, coord: Coord) -> f64 {
        match coord {
            Coord::XMin => self.x_min,
            Coord::YMin => self.y_min,
            Coord::XMax => self.x_max,
            Coord::YMax => self.y_max,
        }
    }
}

/// A ground-truth object: box and class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coord {
    XMin,
    YMin,
    XMax,
    YMax,
}

impl Coord {
    pub const ALL: [Coord; 4] = [Coord::XMin, Coord::YMin, Coord::XMax, Coord::YMax];
}

/// Intersection over union. Zero-area boxes have IoU 0 with everything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(1.0)
}

/// Greedy per-class non-maximum suppression over `(box, class, score)`
/// triples. Returns surviving indices sorted by descending score.
pub fn nms(items: &[(BBox, usize, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].2.total_cmp(&items[a].2).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let (bi, ci, _) = &items[i];
        let suppressed = keep.iter().any(|&k| {
            let (bk, ck, _) = &items[k];
            ck == ci && iou(bk, bi) > iou_threshold
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        // Touching edges share no interior.
        assert_eq!(iou(&a, &BBox::new(2.0, 0.0, 4.0, 2.0)), 0.0);
        // inter = 1, union = 4 + 4 - 1 = 7
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_has_zero_iou() {
        let z = BBox::new(1.0, 1.0, 1.0, 3.0);
        assert_eq!(iou(&z, &z), 0.0);
        assert_eq!(iou(&z, &BBox::new(0.0, 0.0, 4.0, 4.0)), 0.0);
    }

    #[test]
    fn nms_drops_overlapping_lower_score() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(0.0, 0.0, 10.0, 9.0); // IoU 0.9
        assert!((iou(&a, &b) - 0.9).abs() < 1e-12);
        let kept = nms(&[(b, 0, 0.6), (a, 0, 0.8)], 0.5);
        assert_eq!(kept, vec![1]);
        // Different classes never suppress each other.
        let kept = nms(&[(b, 1, 0.6), (a, 0, 0.8)], 0.5);
        assert_eq!(kept, vec![1, 0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn nms_survivors_do_not_overlap(boxes in prop::collection::vec((arb_box(), 0usize..2, 0.0..1.0f64), 1..20)) {
            let kept = nms(&boxes, 0.5);
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    if boxes[a].1 == boxes[b].1 {
                        prop_assert!(iou(&boxes[a].0, &boxes[b].0) <= 0.5);
                    }
                }
                if i > 0 {
                    prop_assert!(boxes[kept[i - 1]].2 >= boxes[a].2);
                }
            }
        }
    }
}
