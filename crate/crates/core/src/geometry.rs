//! Oriented boxes and their bird's-eye-view overlap.

use std::f64::consts::PI;

/// 7-DoF box: center, extents along heading/lateral/vertical, yaw about +Z.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let t = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    if t >= PI {
        t - 2.0 * PI
    } else {
        t
    }
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Self {
        Box3D { x, y, z, l, w, h, theta }
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.l, self.w, self.h, self.theta]
    }

    pub fn normalized(mut self) -> Self {
        self.theta = normalize_angle(self.theta);
        self
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(dx, dy)| [self.x + c * dx - s * dy, self.y + s * dx + c * dy])
    }

    pub fn corners_3d(&self) -> [[f64; 3]; 8] {
        let bev = self.bev_corners();
        let (lo, hi) = (self.z - self.h / 2.0, self.z + self.h / 2.0);
        let mut out = [[0.0; 3]; 8];
        for i in 0..4 {
            out[i] = [bev[i][0], bev[i][1], lo];
            out[i + 4] = [bev[i][0], bev[i][1], hi];
        }
        out
    }

    /// Offset of a point in the box frame (heading along +x).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }

    pub fn from_local(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * q[0] - s * q[1], self.y + s * q[0] + c * q[1], self.z + q[2]]
    }

    /// Closed membership test in the box frame.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.l / 2.0 && q[1].abs() <= self.w / 2.0 && q[2].abs() <= self.h / 2.0
    }

    /// Radius of the footprint's circumscribed circle.
    pub fn bev_radius(&self) -> f64 {
        0.5 * (self.l * self.l + self.w * self.w).sqrt()
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive for CCW).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc
}

/// Clips `subject` against the convex CCW polygon `clip` (Sutherland-Hodgman).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    if a.bev_area() <= 0.0 || b.bev_area() <= 0.0 {
        return 0.0;
    }
    let d2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
    let r = a.bev_radius() + b.bev_radius();
    if d2 > r * r {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners())).max(0.0)
}

/// Rotated-rectangle IoU of the two footprints in the X-Y plane.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Volume IoU: footprint intersection times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let z_overlap = ((a.z + a.h / 2.0).min(b.z + b.h / 2.0) - (a.z - a.h / 2.0).max(b.z - b.h / 2.0)).max(0.0);
    if z_overlap <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * z_overlap;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

/// Footprints overlap with strictly positive area.
pub fn footprints_collide(a: &Box3D, b: &Box3D) -> bool {
    bev_intersection_area(a, b) > 1e-12
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(x: f64, y: f64, side: f64) -> Box3D {
        Box3D::new(x, y, 0.0, side, side, 1.0, 0.0)
    }

    #[test]
    fn identical_and_disjoint() {
        let a = Box3D::new(1.0, 2.0, 0.0, 3.9, 1.6, 1.5, 0.3);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = Box3D { x: 20.0, ..a };
        assert_eq!(bev_iou(&a, &b), 0.0);
    }

    #[test]
    fn axis_aligned_strip_overlap_is_one_third() {
        let a = square(0.0, 0.0, 2.0);
        let b = square(1.0, 0.0, 2.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn half_turn_is_the_same_footprint() {
        let a = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.0, 0.2);
        let b = Box3D { theta: 0.2 + PI, ..a };
        assert!((bev_iou(&a, &b) - 1.0).abs() < 1e-9);
        let c = Box3D { theta: 0.2 + PI / 2.0, ..a };
        // 2x2 core square shared by the crossed rectangles
        assert!((bev_iou(&a, &c) - 4.0 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_box_has_zero_iou() {
        let a = Box3D::new(0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0);
        assert_eq!(bev_iou(&a, &a), 0.0);
    }

    #[test]
    fn iou_3d_uses_vertical_overlap() {
        let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        let b = Box3D { z: 1.0, ..a };
        // intersection 2*2*1 = 4, union 8 + 8 - 4
        assert!((iou_3d(&a, &b) - 4.0 / 12.0).abs() < 1e-12);
        let c = Box3D { z: 3.0, ..a };
        assert_eq!(iou_3d(&a, &c), 0.0);
    }

    #[test]
    fn normalize_angle_range() {
        for a in [-10.0, -PI, -0.1, 0.0, PI - 1e-9, PI, 7.5] {
            let n = normalize_angle(a);
            assert!((-PI..PI).contains(&n), "{a} -> {n}");
            assert!(((a - n) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - n) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn touching_boxes_do_not_collide() {
        let a = square(0.0, 0.0, 2.0);
        let b = square(2.0, 0.0, 2.0);
        assert!(!footprints_collide(&a, &b));
        assert!(footprints_collide(&a, &square(1.9, 0.0, 2.0)));
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-3.0..3.0f64, -3.0..3.0f64, 0.2..5.0f64, 0.2..3.0f64, -4.0..4.0f64)
            .prop_map(|(x, y, l, w, t)| Box3D::new(x, y, 0.0, l, w, 1.0, t))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = bev_iou(&a, &b);
            let ba = bev_iou(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn containment_matches_local_frame(b in arb_box(), u in -0.49..0.49f64, v in -0.49..0.49f64) {
            let p = b.from_local([u * b.l, v * b.w, 0.0]);
            prop_assert!(b.contains(p));
            let q = b.from_local([(0.5 + u.abs() + 0.01) * b.l, 0.0, 0.0]);
            prop_assert!(!b.contains(q));
        }
    }
}
