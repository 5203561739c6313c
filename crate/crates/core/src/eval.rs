//! Decoding network outputs, rotated NMS, and KITTI-style average precision.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::detector::ScoreMode;
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, iou_3d, Box3D};
use crate::io_kitti::{Calibration, LabelRecord, ObjectClass, PointCloud};
use crate::nn::Scalar;
use crate::targets::{anchor_probability, anchor_residual, decode_residual, AnchorGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
    pub class: ObjectClass,
}

/// Every anchor with probability at least `threshold`, decoded in anchor order.
pub fn decode_detections<S: Scalar>(
    score: &[S],
    reg: &[S],
    grid: &AnchorGrid,
    mode: ScoreMode,
    threshold: f64,
    class: ObjectClass,
) -> Vec<Detection> {
    let plane = grid.rows * grid.cols;
    (0..grid.len())
        .filter_map(|i| {
            let (a, cell) = (i / plane, i % plane);
            let p = anchor_probability(score, mode, plane, a, cell);
            (p >= threshold).then(|| Detection {
                bbox: decode_residual(&anchor_residual(reg, plane, a, cell), &grid.boxes[i]),
                score: p,
                class,
            })
        })
        .collect()
}

/// Greedy suppression by descending score; equal scores keep input order.
pub fn nms_bev(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| bev_iou(&dets[k].bbox, &dets[i].bbox) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouMode {
    Bev,
    ThreeD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Eleven,
    Forty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Difficulty {
    pub name: &'static str,
    /// Minimum 2D box height in pixels.
    pub min_height: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

impl Difficulty {
    pub const EASY: Difficulty = Difficulty { name: "easy", min_height: 40.0, max_occlusion: 0, max_truncation: 0.15 };
    pub const MODERATE: Difficulty = Difficulty { name: "moderate", min_height: 25.0, max_occlusion: 1, max_truncation: 0.3 };
    pub const HARD: Difficulty = Difficulty { name: "hard", min_height: 25.0, max_occlusion: 2, max_truncation: 0.5 };
    /// No filtering, for synthetic data without image-plane attributes.
    pub const ALL: Difficulty = Difficulty { name: "all", min_height: 0.0, max_occlusion: i32::MAX, max_truncation: f64::INFINITY };

    pub const KITTI: [Difficulty; 3] = [Self::EASY, Self::MODERATE, Self::HARD];

    fn admits(&self, r: &LabelRecord) -> bool {
        r.bbox_height() >= self.min_height && r.occluded <= self.max_occlusion && r.truncated <= self.max_truncation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub class: ObjectClass,
    pub iou_threshold: f64,
    pub mode: IouMode,
    pub interpolation: Interpolation,
}

impl EvalConfig {
    /// 0.7 for cars, 0.5 for pedestrians and cyclists.
    pub fn for_class(class: ObjectClass, mode: IouMode) -> Self {
        let iou_threshold = if class == ObjectClass::Car { 0.7 } else { 0.5 };
        EvalConfig { class, iou_threshold, mode, interpolation: Interpolation::Eleven }
    }
}

/// One frame of ground truth and detections, all as KITTI records.
#[derive(Debug, Clone, Default)]
pub struct EvalFrame {
    pub gts: Vec<LabelRecord>,
    pub dets: Vec<LabelRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
    /// `(recall, precision)` after each distinct score.
    pub curve: Vec<(f64, f64)>,
}

fn overlap(a: &Box3D, b: &Box3D, mode: IouMode) -> f64 {
    match mode {
        IouMode::Bev => bev_iou(a, b),
        IouMode::ThreeD => iou_3d(a, b),
    }
}

/// Fraction of `det`'s 2D box covered by `region`.
fn covered(det: &[f64; 4], region: &[f64; 4]) -> f64 {
    let w = det[2].min(region[2]) - det[0].max(region[0]);
    let h = det[3].min(region[3]) - det[1].max(region[1]);
    let area = (det[2] - det[0]) * (det[3] - det[1]);
    if w <= 0.0 || h <= 0.0 || area <= 0.0 {
        0.0
    } else {
        w * h / area
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Average precision for one class and difficulty.
///
/// Detections are visited by descending score (ties by frame, then input
/// order) and each takes the unmatched ground truth of highest overlap above
/// the threshold. Matches to ground truths outside the difficulty, and
/// unmatched detections inside DontCare regions or below the minimum height,
/// are ignored.
pub fn average_precision(frames: &[EvalFrame], cfg: &EvalConfig, difficulty: &Difficulty) -> ApResult {
    let name = cfg.class.kitti_name();
    let mut num_gt = 0;
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        num_gt += frame.gts.iter().filter(|g| g.class_name == name && difficulty.admits(g)).count();
        for (d, det) in frame.dets.iter().enumerate() {
            if det.class_name == name {
                entries.push((det.score.unwrap_or(0.0), f, d));
            }
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let gt_boxes: Vec<Vec<Box3D>> = frames.iter().map(|f| f.gts.iter().map(|g| g.eval_box()).collect()).collect();
    let outcomes: Vec<(f64, Outcome)> = entries
        .iter()
        .map(|&(score, f, d)| {
            let det = &frames[f].dets[d];
            let db = det.eval_box();
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in frames[f].gts.iter().enumerate() {
                if gt.class_name != name || taken[f][g] {
                    continue;
                }
                let iou = overlap(&db, &gt_boxes[f][g], cfg.mode);
                if iou >= cfg.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            let outcome = match best {
                Some((g, _)) => {
                    taken[f][g] = true;
                    if difficulty.admits(&frames[f].gts[g]) {
                        Outcome::TruePositive
                    } else {
                        Outcome::Ignored
                    }
                }
                None => {
                    let in_dont_care = frames[f].gts.iter().any(|g| g.is_dont_care() && covered(&det.bbox, &g.bbox) > 0.5);
                    if in_dont_care || det.bbox_height() < difficulty.min_height {
                        Outcome::Ignored
                    } else {
                        Outcome::FalsePositive
                    }
                }
            };
            (score, outcome)
        })
        .collect();

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    for (i, &(score, o)) in outcomes.iter().enumerate() {
        match o {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => {}
        }
        let last_of_score = outcomes.get(i + 1).is_none_or(|n| n.0 != score);
        if last_of_score && tp + fp > 0 && num_gt > 0 {
            curve.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let ap = interpolated_ap(&curve, cfg.interpolation);
    ApResult { ap, num_gt, num_det: entries.len(), curve }
}

/// Mean over the recall grid of the best precision at or beyond each recall.
pub fn interpolated_ap(curve: &[(f64, f64)], interp: Interpolation) -> f64 {
    let levels: Vec<f64> = match interp {
        Interpolation::Eleven => (0..=10).map(|i| i as f64 / 10.0).collect(),
        Interpolation::Forty => (1..=40).map(|i| i as f64 / 40.0).collect(),
    };
    let sum: f64 = levels
        .iter()
        .map(|&r| curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max))
        .sum();
    sum / levels.len() as f64
}

/// Fraction of ground truths overlapped by some detection at BEV IoU at least `iou`.
pub fn bev_recall(dets: &[Detection], gts: &[Box3D], iou: f64) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    let hit = gts.iter().filter(|g| dets.iter().any(|d| bev_iou(&d.bbox, g) >= iou)).count();
    hit as f64 / gts.len() as f64
}

/// KITTI result text: one line per detection, 15 label fields and the score.
pub fn format_results(dets: &[Detection], calib: &Calibration) -> String {
    let mut s = String::new();
    for d in dets {
        let rec = LabelRecord::from_lidar_box(d.class, &d.bbox, calib, Some(d.score));
        let _ = writeln!(s, "{}", rec.to_line());
    }
    s
}

/// Reads a label or result file; every line is kept, including DontCare and other classes.
pub fn read_records(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| LabelRecord::parse(l).map_err(|msg| Error::Parse { path: path.to_path_buf(), line: i + 1, msg }))
        .collect()
}

/// ASCII PLY with the points in grey, ground-truth wireframes in green and detections in red.
pub fn write_ply(path: &Path, cloud: &PointCloud, gts: &[Box3D], dets: &[Detection]) -> Result<()> {
    const EDGES: [(usize, usize); 12] = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)];
    let boxes: Vec<(Box3D, [u8; 3])> =
        gts.iter().map(|b| (*b, [0, 255, 0])).chain(dets.iter().map(|d| (d.bbox, [255, 0, 0]))).collect();
    let n_vertex = cloud.len() + 8 * boxes.len();
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {n_vertex}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nelement edge {}\nproperty int vertex1\n\
         property int vertex2\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        12 * boxes.len()
    );
    for p in &cloud.points {
        let g = (80.0 + 175.0 * p.r.clamp(0.0, 1.0)) as u8;
        let _ = writeln!(s, "{:.4} {:.4} {:.4} {g} {g} {g}", p.x, p.y, p.z);
    }
    for (b, c) in &boxes {
        for v in b.corners_3d() {
            let _ = writeln!(s, "{:.4} {:.4} {:.4} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]);
        }
    }
    for (k, (_, c)) in boxes.iter().enumerate() {
        let base = cloud.len() + 8 * k;
        for (a, b) in EDGES {
            let _ = writeln!(s, "{} {} {} {} {}", base + a, base + b, c[0], c[1], c[2]);
        }
    }
    fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
