//! Oriented boxes and point primitives.
//!
//! Boxes live in the lidar frame: x forward, y left, z up, yaw measured
//! counter-clockwise from +x. BEV overlap is computed exactly by clipping one
//! rotated rectangle against the other (Sutherland-Hodgman), never by
//! sampling.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    let r = yaw.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
    pub class_id: u8,
}

impl Box3D {
    /// Validating constructor; yaw is normalized to `(-pi, pi]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cx: f64,
        cy: f64,
        cz: f64,
        length: f64,
        width: f64,
        height: f64,
        yaw: f64,
        class_id: u8,
    ) -> Result<Self> {
        let all = [cx, cy, cz, length, width, height, yaw];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("box fields must be finite"));
        }
        if length <= 0.0 || width <= 0.0 || height <= 0.0 {
            return Err(Error::invalid(format!(
                "box dimensions must be positive, got {length} x {width} x {height}"
            )));
        }
        Ok(Self {
            cx,
            cy,
            cz,
            length,
            width,
            height,
            yaw: normalize_yaw(yaw),
            class_id,
        })
    }

    /// Same box moved to a new pose; dimensions and class are kept.
    pub fn with_pose(&self, cx: f64, cy: f64, cz: f64, yaw: f64) -> Result<Self> {
        Self::new(
            cx,
            cy,
            cz,
            self.length,
            self.width,
            self.height,
            yaw,
            self.class_id,
        )
    }

    pub fn bev_area(&self) -> f64 {
        self.length * self.width
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.cz - self.height / 2.0, self.cz + self.height / 2.0)
    }

    /// Radius of the circle circumscribing the BEV footprint.
    pub fn bev_radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    /// Express a world point in the box frame (origin at the center,
    /// box-aligned axes).
    pub fn to_local(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        Point3::new(
            c * dx + s * dy,
            -s * dx + c * dy,
            p.z - self.cz,
            p.intensity,
        )
    }

    pub fn to_world(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        Point3::new(
            self.cx + c * p.x - s * p.y,
            self.cy + s * p.x + c * p.y,
            self.cz + p.z,
            p.intensity,
        )
    }

    pub fn contains_local(&self, local: &Point3) -> bool {
        local.x.abs() <= self.length / 2.0
            && local.y.abs() <= self.width / 2.0
            && local.z.abs() <= self.height / 2.0
    }

    pub fn contains(&self, p: &Point3) -> bool {
        self.contains_local(&self.to_local(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub cls_conf: f64,
    pub iou_conf: f64,
}

impl Detection {
    pub fn new(bbox: Box3D, cls_conf: f64, iou_conf: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&cls_conf) || !(0.0..=1.0).contains(&iou_conf) {
            return Err(Error::invalid(format!(
                "confidences must lie in [0, 1], got cls {cls_conf}, iou {iou_conf}"
            )));
        }
        Ok(Self {
            bbox,
            cls_conf,
            iou_conf,
        })
    }
}

pub type Vec2 = [f64; 2];

/// BEV corners, counter-clockwise starting from `(+l/2, +w/2)` in the box frame.
pub fn box_corners_bev(b: &Box3D) -> [Vec2; 4] {
    let (s, c) = b.yaw.sin_cos();
    let hl = b.length / 2.0;
    let hw = b.width / 2.0;
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .map(|(lx, ly)| [b.cx + c * lx - s * ly, b.cy + s * lx + c * ly])
}

fn cross(o: Vec2, a: Vec2, b: Vec2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clip `subject` against the convex counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output: Vec<Vec2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let d_cur = cross(a, b, cur);
            let d_prev = cross(a, b, prev);
            let cur_in = d_cur >= 0.0;
            let prev_in = d_prev >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, d_prev, d_cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, d_prev, d_cur));
            }
        }
    }
    output
}

fn intersect(p: Vec2, q: Vec2, dp: f64, dq: f64) -> Vec2 {
    let t = dp / (dp - dq);
    [p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t]
}

/// Shoelace area; polygons with fewer than three vertices have zero area.
pub fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    (acc / 2.0).abs()
}

fn same_footprint(a: &Box3D, b: &Box3D) -> bool {
    a.cx == b.cx && a.cy == b.cy && a.length == b.length && a.width == b.width && a.yaw == b.yaw
}

/// Area of the BEV intersection of two boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let dist = (a.cx - b.cx).hypot(a.cy - b.cy);
    if dist > a.bev_radius() + b.bev_radius() {
        return 0.0;
    }
    if same_footprint(a, b) {
        return a.bev_area();
    }
    // canonical argument order makes the result exactly symmetric
    let key = |b: &Box3D| [b.cx, b.cy, b.yaw, b.length, b.width];
    let swap = key(a)
        .iter()
        .zip(key(b).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .is_some_and(|o| o.is_gt());
    let (a, b) = if swap { (b, a) } else { (a, b) };
    let pa = box_corners_bev(a);
    let pb = box_corners_bev(b);
    polygon_area(&clip_convex(&pa, &pb))
        .min(a.bev_area())
        .min(b.bev_area())
}

pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Boundary-inclusive membership mask.
pub fn points_in_box(points: &[Point3], b: &Box3D) -> Vec<bool> {
    points.iter().map(|p| b.contains(p)).collect()
}

/// Greedy BEV NMS ranked by `cls_conf`; equal scores keep the earlier input first.
pub fn nms_bev(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .cls_conf
            .total_cmp(&dets[i].cls_conf)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let cand = &dets[i];
        if kept
            .iter()
            .all(|k| iou_bev(&k.bbox, &cand.bbox) <= iou_threshold)
        {
            kept.push(*cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn bx(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> Box3D {
        Box3D::new(cx, cy, 0.0, l, w, 1.0, yaw, 0).unwrap()
    }

    fn close(a: Vec2, b: Vec2) -> bool {
        (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
    }

    #[test]
    fn corners_axis_aligned() {
        let c = box_corners_bev(&bx(0.0, 0.0, 2.0, 2.0, 0.0));
        assert_eq!(c, [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]]);
    }

    #[test]
    fn corners_quarter_turn_is_same_set() {
        let c = box_corners_bev(&bx(0.0, 0.0, 2.0, 2.0, FRAC_PI_2));
        let expected = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        for e in expected {
            assert!(c.iter().any(|p| close(*p, e)), "{e:?} missing from {c:?}");
        }
    }

    #[test]
    fn corners_by_hand_at_thirty_degrees() {
        // cos 30 = sqrt(3)/2, sin 30 = 1/2; local corner (2, 1) maps to
        // (2 cos - 1 sin, 2 sin + 1 cos) = (sqrt3 - 0.5, 1 + sqrt3/2), then + (1, 2).
        let s3 = 3f64.sqrt();
        let c = box_corners_bev(&bx(1.0, 2.0, 4.0, 2.0, PI / 6.0));
        let expected = [
            [1.0 + s3 - 0.5, 2.0 + 1.0 + s3 / 2.0],
            [1.0 - s3 - 0.5, 2.0 - 1.0 + s3 / 2.0],
            [1.0 - s3 + 0.5, 2.0 - 1.0 - s3 / 2.0],
            [1.0 + s3 + 0.5, 2.0 + 1.0 - s3 / 2.0],
        ];
        for (got, want) in c.iter().zip(expected) {
            assert!(close(*got, want), "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn yaw_is_normalized() {
        assert_eq!(normalize_yaw(PI), PI);
        assert_eq!(normalize_yaw(-PI), PI);
        assert!((normalize_yaw(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-12);
        assert!(Box3D::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0).is_err());
        assert!(Box3D::new(f64::NAN, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn iou_bev_analytic_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(iou_bev(&a, &a), 1.0);
        assert_eq!(iou_bev(&a, &bx(100.0, 0.0, 2.0, 2.0, 0.0)), 0.0);
        let strip = iou_bev(&a, &bx(1.0, 0.0, 2.0, 2.0, 0.0));
        assert!((strip - 1.0 / 3.0).abs() < 1e-12, "{strip}");
        // touching along an edge has zero-area intersection
        assert_eq!(iou_bev(&a, &bx(2.0, 0.0, 2.0, 2.0, 0.0)), 0.0);
    }

    #[test]
    fn iou_bev_square_vs_rotated_square_matches_monte_carlo() {
        // Monte-Carlo area oracle, independent of the clipping path.
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 1.0, 1.0, PI / 4.0);
        let mut r = rng::rng(11);
        let half = 0.75;
        let n = 1_000_000;
        let (mut in_a, mut in_b, mut in_both) = (0u32, 0u32, 0u32);
        for _ in 0..n {
            let p = Point3::new(
                r.random_range(-half..half),
                r.random_range(-half..half),
                0.0,
                0.0,
            );
            let ia = a.contains(&p);
            let ib = b.contains(&p);
            in_a += ia as u32;
            in_b += ib as u32;
            in_both += (ia && ib) as u32;
        }
        let mc = in_both as f64 / (in_a + in_b - in_both) as f64;
        // closed form: octagon area 2(sqrt2 - 1) = 0.828..., IoU = 0.828 / (2 - 0.828)
        let octagon = 2.0 * (2f64.sqrt() - 1.0);
        let exact = octagon / (2.0 - octagon);
        let got = iou_bev(&a, &b);
        assert!((got - exact).abs() < 1e-12, "{got} vs {exact}");
        assert!((got - mc).abs() < 0.01, "{got} vs mc {mc}");
    }

    #[test]
    fn iou_3d_analytic_cases() {
        let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0, 0).unwrap();
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        let above = Box3D::new(0.0, 0.0, 5.0, 2.0, 2.0, 2.0, 0.0, 0).unwrap();
        assert_eq!(iou_3d(&a, &above), 0.0);
        let half = Box3D::new(0.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0, 0).unwrap();
        assert!((iou_3d(&a, &half) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn points_in_box_cases() {
        let b = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 2.0, 0.0, 0).unwrap();
        let pts = [
            Point3::new(0.0, 0.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0, 0.0),
            Point3::new(2.0 + 1e-9, 0.0, 0.0, 0.0),
        ];
        assert_eq!(points_in_box(&pts, &b), vec![true, true, false]);

        // yaw = pi/4, l = 4, w = 2: local corner region (1.9, 0.9) maps to
        // world ((1.9 - 0.9)/sqrt2, (1.9 + 0.9)/sqrt2) = (0.7071, 1.9799).
        let r = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 2.0, PI / 4.0, 0).unwrap();
        let inside = Point3::new(1.0 / 2f64.sqrt(), 2.8 / 2f64.sqrt(), 0.0, 0.0);
        let outside = Point3::new(1.0 / 2f64.sqrt(), 3.0 / 2f64.sqrt() + 0.05, 0.0, 0.0);
        assert_eq!(points_in_box(&[inside, outside], &r), vec![true, false]);
    }

    fn det(cx: f64, score: f64) -> Detection {
        Detection::new(bx(cx, 0.0, 2.0, 2.0, 0.0), score, 0.5).unwrap()
    }

    #[test]
    fn nms_cases() {
        assert_eq!(nms_bev(&[det(0.0, 0.3)], 0.5).len(), 1);
        let kept = nms_bev(&[det(0.0, 0.8), det(0.0, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].cls_conf, 0.9);
        // IoU 1/3 stays under a 0.5 threshold
        assert_eq!(nms_bev(&[det(0.0, 0.9), det(1.0, 0.8)], 0.5).len(), 2);
        // equal scores: earlier index wins
        let mut a = det(0.0, 0.7);
        a.iou_conf = 0.1;
        let kept = nms_bev(&[a, det(0.0, 0.7)], 0.5);
        assert_eq!(kept, vec![a]);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -5.0..5.0f64,
            -5.0..5.0f64,
            -1.0..1.0f64,
            0.5..4.0f64,
            0.5..3.0f64,
            0.5..2.0f64,
            -PI..PI,
        )
            .prop_map(|(x, y, z, l, w, h, yaw)| Box3D::new(x, y, z, l, w, h, yaw, 0).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou_bev(&a, &b);
            let ba = iou_bev(&b, &a);
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            let ab3 = iou_3d(&a, &b);
            prop_assert!((ab3 - iou_3d(&b, &a)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab3));
            prop_assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn half_turn_is_geometrically_identical(a in arb_box()) {
            let flipped = a.with_pose(a.cx, a.cy, a.cz, a.yaw + PI).unwrap();
            prop_assert!((iou_bev(&a, &flipped) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn containment_is_rigid_invariant(
            b in arb_box(),
            lx in -3.0..3.0f64, ly in -2.0..2.0f64, lz in -1.0..1.0f64,
            tx in -10.0..10.0f64, ty in -10.0..10.0f64, tz in -2.0..2.0f64, rot in -PI..PI,
        ) {
            let p = b.to_world(&Point3::new(lx, ly, lz, 0.0));
            let before = b.contains(&p);
            let (s, c) = rot.sin_cos();
            let moved = Point3::new(c * p.x - s * p.y + tx, s * p.x + c * p.y + ty, p.z + tz, 0.0);
            let mb = b.with_pose(c * b.cx - s * b.cy + tx, s * b.cx + c * b.cy + ty, b.cz + tz, b.yaw + rot).unwrap();
            // skip points within rounding distance of a face
            let local = b.to_local(&p);
            let margin = (b.length / 2.0 - local.x.abs())
                .min(b.width / 2.0 - local.y.abs())
                .min(b.height / 2.0 - local.z.abs())
                .abs();
            prop_assume!(margin > 1e-9);
            prop_assert_eq!(before, mb.contains(&moved));
        }

        #[test]
        fn nms_order_independent_and_sorted(
            xs in proptest::collection::vec((-6.0..6.0f64, 0.0..1.0f64), 1..12),
            seed in any::<u64>(),
        ) {
            let mut dets: Vec<Detection> = xs.iter().enumerate()
                // distinct scores
                .map(|(i, &(x, s))| det(x, (s * 0.9 + i as f64 * 1e-3).min(1.0)))
                .collect();
            let kept = nms_bev(&dets, 0.2);
            for w in kept.windows(2) {
                prop_assert!(w[0].cls_conf >= w[1].cls_conf);
            }
            let mut r = rng::rng(seed);
            for i in (1..dets.len()).rev() {
                let j = r.random_range(0..=i);
                dets.swap(i, j);
            }
            prop_assert_eq!(kept, nms_bev(&dets, 0.2));
        }
    }
}
