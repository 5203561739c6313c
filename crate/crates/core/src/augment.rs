//! On-the-fly training augmentation: per-box perturbation with a collision
//! test, global scaling and global rotation about the Z axis.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{footprints_collide, normalize_angle, Box3D};
use crate::io_kitti::{ObjectClass, PointCloud};

/// A point cloud with its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
    pub classes: Vec<ObjectClass>,
}

impl Scene {
    /// Indices of the points inside each box.
    pub fn membership(&self) -> Vec<Vec<usize>> {
        self.boxes
            .iter()
            .map(|b| (0..self.cloud.len()).filter(|&i| b.contains(self.cloud.points[i].xyz())).collect())
            .collect()
    }
}

/// Source of the random draws; implemented for every [`Rng`] and by test stubs.
pub trait Sampler {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64;
    fn normal(&mut self, mean: f64, std: f64) -> f64;
}

impl<R: Rng + ?Sized> Sampler for R {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            lo
        } else {
            self.random_range(lo..hi)
        }
    }

    fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).expect("finite, non-negative std").sample(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub perturb: bool,
    pub scale: bool,
    pub rotate: bool,
    /// Per-box yaw perturbation is uniform in `[-perturb_yaw, perturb_yaw]`.
    pub perturb_yaw: f64,
    /// Per-axis translation standard deviation in meters.
    pub perturb_std: f64,
    pub scale_range: (f64, f64),
    /// Global rotation is uniform in `[-rotate_max, rotate_max]`.
    pub rotate_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            perturb: true,
            scale: true,
            rotate: true,
            perturb_yaw: PI / 10.0,
            perturb_std: 1.0,
            scale_range: (0.95, 1.05),
            rotate_max: PI / 4.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { perturb: false, scale: false, rotate: false, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PerturbReport {
    pub reverted: usize,
}

/// Moves each box together with its points by a random yaw about its center
/// and a random translation. Boxes whose footprints collide afterwards are
/// restored; the test runs once more after restoring.
pub fn perturb_boxes(scene: &Scene, s: &mut impl Sampler, cfg: &AugmentConfig) -> (Scene, PerturbReport) {
    let members = scene.membership();
    let n = scene.boxes.len();
    let mut owner = vec![usize::MAX; scene.cloud.len()];
    for (b, pts) in members.iter().enumerate() {
        for &i in pts {
            if owner[i] == usize::MAX {
                owner[i] = b;
            }
        }
    }
    let moves: Vec<(f64, [f64; 3])> = (0..n)
        .map(|_| {
            let yaw = s.uniform(-cfg.perturb_yaw, cfg.perturb_yaw);
            let t = [s.normal(0.0, cfg.perturb_std), s.normal(0.0, cfg.perturb_std), s.normal(0.0, cfg.perturb_std)];
            (yaw, t)
        })
        .collect();
    let moved: Vec<Box3D> = scene
        .boxes
        .iter()
        .zip(&moves)
        .map(|(b, (yaw, t))| Box3D { x: b.x + t[0], y: b.y + t[1], z: b.z + t[2], theta: normalize_angle(b.theta + yaw), ..*b })
        .collect();

    let mut keep = vec![true; n];
    for _ in 0..2 {
        let current: Vec<&Box3D> = (0..n).map(|i| if keep[i] { &moved[i] } else { &scene.boxes[i] }).collect();
        let mut offenders = vec![false; n];
        for i in 0..n {
            for j in i + 1..n {
                if (keep[i] || keep[j]) && footprints_collide(current[i], current[j]) {
                    offenders[i] = true;
                    offenders[j] = true;
                }
            }
        }
        for i in 0..n {
            keep[i] &= !offenders[i];
        }
    }

    let mut out = scene.clone();
    for (p, &b) in out.cloud.points.iter_mut().zip(&owner) {
        if b != usize::MAX && keep[b] {
            let src = &scene.boxes[b];
            let (yaw, t) = moves[b];
            let local = [p.x - src.x, p.y - src.y, p.z - src.z];
            let (sn, cs) = yaw.sin_cos();
            p.set_xyz([cs * local[0] - sn * local[1] + src.x + t[0], sn * local[0] + cs * local[1] + src.y + t[1], local[2] + src.z + t[2]]);
        }
    }
    for i in 0..n {
        if keep[i] {
            out.boxes[i] = moved[i];
        }
    }
    let reverted = keep.iter().filter(|k| !**k).count();
    (out, PerturbReport { reverted })
}

/// Multiplies all coordinates, box centers and box dimensions by `factor`.
pub fn scale_scene(scene: &Scene, factor: f64) -> Scene {
    let mut out = scene.clone();
    for p in &mut out.cloud.points {
        p.set_xyz([p.x * factor, p.y * factor, p.z * factor]);
    }
    for b in &mut out.boxes {
        *b = Box3D { x: b.x * factor, y: b.y * factor, z: b.z * factor, l: b.l * factor, w: b.w * factor, h: b.h * factor, theta: b.theta };
    }
    out
}

/// Rotates points and box centers about the origin by `phi` around Z; yaws shift by `phi`.
pub fn rotate_scene(scene: &Scene, phi: f64) -> Scene {
    let (sn, cs) = phi.sin_cos();
    let mut out = scene.clone();
    for p in &mut out.cloud.points {
        p.set_xyz([cs * p.x - sn * p.y, sn * p.x + cs * p.y, p.z]);
    }
    for b in &mut out.boxes {
        let (x, y) = (cs * b.x - sn * b.y, sn * b.x + cs * b.y);
        *b = Box3D { x, y, theta: normalize_angle(b.theta + phi), ..*b };
    }
    out
}

pub fn global_scale(scene: &Scene, s: &mut impl Sampler, cfg: &AugmentConfig) -> Scene {
    scale_scene(scene, s.uniform(cfg.scale_range.0, cfg.scale_range.1))
}

pub fn global_rotate(scene: &Scene, s: &mut impl Sampler, cfg: &AugmentConfig) -> Scene {
    rotate_scene(scene, s.uniform(-cfg.rotate_max, cfg.rotate_max))
}

/// The enabled augmentations in order: perturb, scale, rotate.
pub fn augment_scene(scene: &Scene, s: &mut impl Sampler, cfg: &AugmentConfig) -> Scene {
    let mut cur = scene.clone();
    if cfg.perturb {
        cur = perturb_boxes(&cur, s, cfg).0;
    }
    if cfg.scale {
        cur = global_scale(&cur, s, cfg);
    }
    if cfg.rotate {
        cur = global_rotate(&cur, s, cfg);
    }
    cur
}

/// Seed for one sample of one epoch, derived by SplitMix64 finalization.
pub fn sample_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    mix(mix(mix(seed) ^ epoch) ^ index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io_kitti::Point;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Replays queued draws, then zeros.
    struct Forced {
        uniform: Vec<f64>,
        normal: Vec<f64>,
    }

    impl Sampler for Forced {
        fn uniform(&mut self, _: f64, _: f64) -> f64 {
            if self.uniform.is_empty() { 0.0 } else { self.uniform.remove(0) }
        }
        fn normal(&mut self, _: f64, _: f64) -> f64 {
            if self.normal.is_empty() { 0.0 } else { self.normal.remove(0) }
        }
    }

    #[derive(Default)]
    struct Recorder {
        uniform: Vec<(f64, f64)>,
        normal: Vec<(f64, f64)>,
    }

    impl Sampler for Recorder {
        fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
            self.uniform.push((lo, hi));
            0.0
        }
        fn normal(&mut self, mean: f64, std: f64) -> f64 {
            self.normal.push((mean, std));
            0.0
        }
    }

    fn filled_scene(boxes: Vec<Box3D>, per_box: usize, clutter: usize, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        for b in &boxes {
            for _ in 0..per_box {
                let q = [
                    rng.random_range(-0.49..0.49) * b.l,
                    rng.random_range(-0.49..0.49) * b.w,
                    rng.random_range(-0.49..0.49) * b.h,
                ];
                let p = b.from_local(q);
                points.push(Point::new(p[0], p[1], p[2], rng.random()));
            }
        }
        for _ in 0..clutter {
            points.push(Point::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), -1.7, 0.1));
        }
        let classes = vec![ObjectClass::Car; boxes.len()];
        Scene { cloud: PointCloud::new(points), boxes, classes }
    }

    fn car(x: f64, y: f64, theta: f64) -> Box3D {
        Box3D::new(x, y, -1.0, 3.9, 1.6, 1.5, theta)
    }

    #[test]
    fn forced_identity() {
        let scene = filled_scene(vec![car(10.0, 0.0, 0.3), car(20.0, 5.0, -1.0)], 40, 30, 1);
        let mut zero = Forced { uniform: vec![], normal: vec![] };
        assert_eq!(perturb_boxes(&scene, &mut zero, &AugmentConfig::default()).0, scene);
        assert_eq!(scale_scene(&scene, 1.0), scene);
        assert_eq!(rotate_scene(&scene, 0.0), scene);
    }

    #[test]
    fn single_box_is_never_reverted() {
        let scene = filled_scene(vec![car(10.0, 0.0, 0.0)], 40, 0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (out, report) = perturb_boxes(&scene, &mut rng, &AugmentConfig::default());
            assert_eq!(report.reverted, 0);
            assert_ne!(out.boxes[0], scene.boxes[0]);
        }
    }

    #[test]
    fn forced_collision_reverts_both() {
        let scene = filled_scene(vec![car(10.0, 0.0, 0.0), car(10.0, 2.0, 0.0), car(30.0, 0.0, 0.0)], 40, 10, 4);
        // box 0 moves +1 in y straight into box 1; box 2 moves freely
        let mut s = Forced { uniform: vec![0.0, 0.0, 0.1], normal: vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0] };
        let (out, report) = perturb_boxes(&scene, &mut s, &AugmentConfig::default());
        assert_eq!(report.reverted, 2);
        assert_eq!(&out.boxes[..2], &scene.boxes[..2]);
        assert_ne!(out.boxes[2], scene.boxes[2]);
        let members = scene.membership();
        for b in 0..2 {
            for &i in &members[b] {
                assert_eq!(out.cloud.points[i], scene.cloud.points[i]);
            }
        }
    }

    #[test]
    fn scale_example() {
        let mut scene = filled_scene(vec![Box3D::new(5.0, 0.0, -1.0, 2.0, 1.0, 1.0, 0.4)], 20, 0, 5);
        scene.cloud.points.push(Point::new(10.0, 0.0, -1.0, 0.0));
        let out = scale_scene(&scene, 1.05);
        assert!((out.boxes[0].l - 2.1).abs() < 1e-12);
        assert_eq!(out.boxes[0].theta, 0.4);
        let p = out.cloud.points.last().unwrap();
        assert!((p.x - 10.5).abs() < 1e-12 && p.y == 0.0 && (p.z + 1.05).abs() < 1e-12);
        assert_eq!(out.membership(), scene.membership());
    }

    #[test]
    fn quarter_turn() {
        let mut scene = filled_scene(vec![car(5.0, 0.0, 0.0)], 5, 0, 6);
        scene.cloud.points.push(Point::new(1.0, 0.0, 0.7, 0.0));
        let out = rotate_scene(&scene, PI / 2.0);
        let p = out.cloud.points.last().unwrap();
        assert!(p.x.abs() < 1e-15 && (p.y - 1.0).abs() < 1e-15 && p.z == 0.7);
        assert!((out.boxes[0].y - 5.0).abs() < 1e-12 && (out.boxes[0].theta - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn parameter_ranges() {
        let scene = filled_scene(vec![car(5.0, 0.0, 0.0), car(15.0, 0.0, 0.0)], 5, 0, 7);
        let mut rec = Recorder::default();
        augment_scene(&scene, &mut rec, &AugmentConfig::default());
        assert_eq!(rec.uniform, vec![(-PI / 10.0, PI / 10.0), (-PI / 10.0, PI / 10.0), (0.95, 1.05), (-PI / 4.0, PI / 4.0)]);
        assert_eq!(rec.normal, vec![(0.0, 1.0); 6]);
    }

    #[test]
    fn seeded_stream_is_reproducible() {
        let scene = filled_scene(vec![car(5.0, 0.0, 0.0), car(15.0, 4.0, 1.0)], 30, 20, 8);
        let run = |e, i| augment_scene(&scene, &mut ChaCha8Rng::seed_from_u64(sample_seed(42, e, i)), &AugmentConfig::default());
        assert_eq!(run(1, 2), run(1, 2));
        assert_ne!(run(1, 2), run(2, 1));
        assert_ne!(sample_seed(1, 0, 0), sample_seed(0, 1, 0));
    }

    fn scene_strategy() -> impl Strategy<Value = (Scene, u64)> {
        (1usize..4, 0u64..10_000).prop_map(|(n, seed)| {
            let boxes = (0..n).map(|i| car(8.0 + 12.0 * i as f64, (i as f64 - 1.0) * 6.0, 0.4 * i as f64)).collect();
            (filled_scene(boxes, 30, 25, seed), seed)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn augmentation_contracts((scene, seed) in scene_strategy()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = AugmentConfig::default();
            let members = scene.membership();
            let inside: std::collections::HashSet<usize> = members.iter().flatten().copied().collect();

            let (p, _) = perturb_boxes(&scene, &mut rng, &cfg);
            prop_assert_eq!(p.cloud.len(), scene.cloud.len());
            prop_assert_eq!(p.boxes.len(), scene.boxes.len());
            for i in 0..scene.cloud.len() {
                if !inside.contains(&i) {
                    prop_assert_eq!(p.cloud.points[i], scene.cloud.points[i]);
                }
            }
            let after = p.membership();
            for b in 0..scene.boxes.len() {
                for &i in &members[b] {
                    prop_assert!(after[b].contains(&i));
                }
            }

            let phi = rng.random_range(-PI..PI);
            let r = rotate_scene(&scene, phi);
            prop_assert_eq!(r.membership(), members.clone());
            let pts = &scene.cloud.points;
            for i in (0..pts.len()).step_by(7) {
                for j in (0..pts.len()).step_by(5) {
                    let d0 = ((pts[i].x - pts[j].x).powi(2) + (pts[i].y - pts[j].y).powi(2) + (pts[i].z - pts[j].z).powi(2)).sqrt();
                    let q = &r.cloud.points;
                    let d1 = ((q[i].x - q[j].x).powi(2) + (q[i].y - q[j].y).powi(2) + (q[i].z - q[j].z).powi(2)).sqrt();
                    prop_assert!((d0 - d1).abs() <= 1e-6);
                }
            }
            let s = scale_scene(&scene, rng.random_range(0.95..1.05));
            prop_assert_eq!(s.membership(), members);
        }
    }
}
