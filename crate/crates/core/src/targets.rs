//! Anchor grid, BEV IoU matching, residual encoding, and the detection loss.

use std::f64::consts::FRAC_PI_2;

use crate::detector::{ScoreMode, BOX_DIM};
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, normalize_angle, Box3D};
use crate::io_kitti::Range;
use crate::nn::loss::{bce_with_logit, sigmoid, smooth_l1};
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    pub l: f64,
    pub w: f64,
    pub h: f64,
    /// Center height `z_c`.
    pub z: f64,
    pub rotations: Vec<f64>,
}

impl AnchorSpec {
    pub fn with_two_rotations(l: f64, w: f64, h: f64, z: f64) -> Self {
        AnchorSpec { l, w, h, z, rotations: vec![0.0, FRAC_PI_2] }
    }
}

/// Anchors tiled over the head grid. Anchor `a` at cell `(h, w)` has index
/// `a * Hh * Wh + h * Wh + w`; rows run along Y and columns along X.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub boxes: Vec<Box3D>,
    pub rows: usize,
    pub cols: usize,
    pub per_cell: usize,
    pub range: Range,
    /// Cell size `(along Y, along X)` in meters.
    pub stride: (f64, f64),
    /// Base diagonal `sqrt(l^2 + w^2)`.
    pub diagonal: f64,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn index(&self, a: usize, row: usize, col: usize) -> usize {
        (a * self.rows + row) * self.cols + col
    }

    /// `(a, row, col)` of a flat anchor index.
    pub fn cell(&self, i: usize) -> (usize, usize, usize) {
        let plane = self.rows * self.cols;
        (i / plane, (i % plane) / self.cols, i % self.cols)
    }
}

pub fn make_anchor_grid(spec: &AnchorSpec, range: &Range, rows: usize, cols: usize) -> AnchorGrid {
    let sy = (range.y.1 - range.y.0) / rows as f64;
    let sx = (range.x.1 - range.x.0) / cols as f64;
    let mut boxes = Vec::with_capacity(spec.rotations.len() * rows * cols);
    for &theta in &spec.rotations {
        for r in 0..rows {
            for c in 0..cols {
                let x = range.x.0 + (c as f64 + 0.5) * sx;
                let y = range.y.0 + (r as f64 + 0.5) * sy;
                boxes.push(Box3D::new(x, y, spec.z, spec.l, spec.w, spec.h, theta));
            }
        }
    }
    AnchorGrid {
        boxes,
        rows,
        cols,
        per_cell: spec.rotations.len(),
        range: *range,
        stride: (sy, sx),
        diagonal: spec.l.hypot(spec.w),
    }
}

/// Equation-1 residuals `(dx, dy, dz, dl, dw, dh, dtheta)` of `gt` relative to `anchor`.
pub fn encode_residual(gt: &Box3D, anchor: &Box3D) -> Result<[f64; 7]> {
    if !(gt.l > 0.0 && gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Shape(format!("ground-truth box has non-positive extent: {gt:?}")));
    }
    let d = anchor.l.hypot(anchor.w);
    Ok([
        (gt.x - anchor.x) / d,
        (gt.y - anchor.y) / d,
        (gt.z - anchor.z) / anchor.h,
        (gt.l / anchor.l).ln(),
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
        gt.theta - anchor.theta,
    ])
}

/// Inverse of [`encode_residual`]; the yaw is normalized to `[-pi, pi)`.
pub fn decode_residual(u: &[f64; 7], anchor: &Box3D) -> Box3D {
    let d = anchor.l.hypot(anchor.w);
    Box3D::new(
        anchor.x + u[0] * d,
        anchor.y + u[1] * d,
        anchor.z + u[2] * anchor.h,
        anchor.l * u[3].exp(),
        anchor.w * u[4].exp(),
        anchor.h * u[5].exp(),
        normalize_angle(anchor.theta + u[6]),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchThresholds {
    /// Anchors with IoU above this are positive.
    pub positive: f64,
    /// Anchors whose best IoU is below this are negative.
    pub negative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    DontCare,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchLabels {
    pub labels: Vec<AnchorLabel>,
    /// `(anchor, residual target)` for every positive, in anchor order.
    pub positives: Vec<(usize, [f64; 7])>,
    pub num_negative: usize,
}

impl MatchLabels {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }
}

/// Assigns every anchor a label.
///
/// Positives are anchors above the positive threshold, matched to their
/// highest-IoU ground truth (lowest index on ties), plus each ground truth's
/// best anchor regardless of threshold. Forced anchors are handed out in
/// order of decreasing best IoU, and a ground truth whose best anchor is
/// already forced takes its next best, so every ground truth that overlaps
/// the grid has a positive of its own.
pub fn match_anchors(grid: &AnchorGrid, gts: &[Box3D], th: MatchThresholds) -> Result<MatchLabels> {
    let n = grid.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut per_gt: Vec<Vec<(usize, f64)>> = Vec::with_capacity(gts.len());
    for (g, gt) in gts.iter().enumerate() {
        let mut hits = Vec::new();
        for i in candidate_anchors(grid, gt) {
            let iou = bev_iou(&grid.boxes[i], gt);
            if iou <= 0.0 {
                continue;
            }
            hits.push((i, iou));
            if iou > best_iou[i] {
                best_iou[i] = iou;
                best_gt[i] = g;
            }
        }
        // best first, lowest anchor index on ties
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        per_gt.push(hits);
    }

    let mut labels: Vec<AnchorLabel> = (0..n)
        .map(|i| {
            if best_iou[i] > th.positive {
                AnchorLabel::Positive(best_gt[i])
            } else if best_iou[i] < th.negative {
                AnchorLabel::Negative
            } else {
                AnchorLabel::DontCare
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..gts.len()).filter(|&g| !per_gt[g].is_empty()).collect();
    order.sort_by(|&a, &b| per_gt[b][0].1.total_cmp(&per_gt[a][0].1).then(a.cmp(&b)));
    let mut forced = vec![false; n];
    for g in order {
        if let Some(&(i, _)) = per_gt[g].iter().find(|(i, _)| !forced[*i]) {
            forced[i] = true;
            labels[i] = AnchorLabel::Positive(g);
        }
    }

    let mut positives = Vec::new();
    let mut num_negative = 0;
    for (i, l) in labels.iter().enumerate() {
        match *l {
            AnchorLabel::Positive(g) => positives.push((i, encode_residual(&gts[g], &grid.boxes[i])?)),
            AnchorLabel::Negative => num_negative += 1,
            AnchorLabel::DontCare => {}
        }
    }
    Ok(MatchLabels { labels, positives, num_negative })
}

/// Anchors whose cell lies within reach of the box footprint.
fn candidate_anchors(grid: &AnchorGrid, gt: &Box3D) -> Vec<usize> {
    let reach = gt.bev_radius() + 0.5 * grid.diagonal;
    let span = |center: f64, lo: f64, step: f64, n: usize| -> Option<(usize, usize)> {
        let a = ((center - reach - lo) / step - 0.5).floor().max(0.0);
        let b = ((center + reach - lo) / step - 0.5).ceil().min(n as f64 - 1.0);
        (b >= a).then_some((a as usize, b as usize))
    };
    let (Some((r0, r1)), Some((c0, c1))) = (
        span(gt.y, grid.range.y.0, grid.stride.0, grid.rows),
        span(gt.x, grid.range.x.0, grid.stride.1, grid.cols),
    ) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for a in 0..grid.per_cell {
        for r in r0..=r1 {
            out.extend((c0..=c1).map(|c| grid.index(a, r, c)));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.5, beta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    /// `alpha` times the mean positive classification loss.
    pub cls_pos: f64,
    /// `beta` times the mean negative classification loss.
    pub cls_neg: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.total += scale * other.total;
        self.cls_pos += scale * other.cls_pos;
        self.cls_neg += scale * other.cls_neg;
        self.reg += scale * other.reg;
    }
}

/// Probability that anchor `a` at `(row, col)` is positive, from one frame's `[A*s, Hh, Wh]` score map.
pub fn anchor_probability<S: Scalar>(score: &[S], mode: ScoreMode, plane: usize, a: usize, cell: usize) -> f64 {
    match mode {
        ScoreMode::Sigmoid => sigmoid(score[a * plane + cell].as_f64()),
        ScoreMode::Softmax2 => sigmoid(score[(2 * a + 1) * plane + cell].as_f64() - score[2 * a * plane + cell].as_f64()),
    }
}

/// The detection loss of one frame and its gradients w.r.t. the score map
/// `[A*s, Hh, Wh]` and regression map `[7A, Hh, Wh]`, each scaled by `scale`.
pub fn total_loss<S: Scalar>(
    score: &[S],
    reg: &[S],
    grid: &AnchorGrid,
    labels: &MatchLabels,
    mode: ScoreMode,
    weights: LossWeights,
    scale: f64,
) -> Result<(LossBreakdown, Vec<S>, Vec<S>)> {
    let plane = grid.rows * grid.cols;
    let a_count = grid.per_cell;
    if score.len() != a_count * mode.channels_per_anchor() * plane || reg.len() != a_count * BOX_DIM * plane {
        return Err(Error::Shape(format!("maps of {} / {} values do not fit {} anchors", score.len(), reg.len(), grid.len())));
    }
    let n_pos = labels.num_positive();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let n_neg = labels.num_negative;
    let mut gs = vec![S::zero(); score.len()];
    let mut gr = vec![S::zero(); reg.len()];
    let (mut pos_sum, mut neg_sum, mut reg_sum) = (0.0, 0.0, 0.0);
    let pos_w = weights.alpha / n_pos as f64;
    let neg_w = if n_neg > 0 { weights.beta / n_neg as f64 } else { 0.0 };

    for (i, l) in labels.labels.iter().enumerate() {
        let (target, w) = match l {
            AnchorLabel::Positive(_) => (1.0, pos_w),
            AnchorLabel::Negative => (0.0, neg_w),
            AnchorLabel::DontCare => continue,
        };
        let (a, cell) = (i / plane, i % plane);
        let (loss, dz) = match mode {
            ScoreMode::Sigmoid => bce_with_logit(score[a * plane + cell].as_f64(), target),
            ScoreMode::Softmax2 => {
                bce_with_logit(score[(2 * a + 1) * plane + cell].as_f64() - score[2 * a * plane + cell].as_f64(), target)
            }
        };
        if target == 1.0 {
            pos_sum += loss;
        } else {
            neg_sum += loss;
        }
        let g = S::from_f64_lossy(scale * w * dz);
        match mode {
            ScoreMode::Sigmoid => gs[a * plane + cell] += g,
            ScoreMode::Softmax2 => {
                gs[(2 * a + 1) * plane + cell] += g;
                gs[2 * a * plane + cell] -= g;
            }
        }
    }

    let reg_w = 1.0 / n_pos as f64;
    for (i, target) in &labels.positives {
        let (a, cell) = (i / plane, i % plane);
        let u: Vec<f64> = (0..BOX_DIM).map(|j| reg[(a * BOX_DIM + j) * plane + cell].as_f64()).collect();
        let (l, g) = smooth_l1(&u, target);
        reg_sum += l;
        for j in 0..BOX_DIM {
            gr[(a * BOX_DIM + j) * plane + cell] += S::from_f64_lossy(scale * reg_w * g[j]);
        }
    }

    let cls_pos = pos_w * pos_sum;
    let cls_neg = neg_w * neg_sum;
    let reg_term = reg_w * reg_sum;
    let breakdown = LossBreakdown { total: cls_pos + cls_neg + reg_term, cls_pos, cls_neg, reg: reg_term };
    Ok((breakdown, gs, gr))
}

/// The regression prediction of one anchor from a `[7A, Hh, Wh]` map.
pub fn anchor_residual<S: Scalar>(reg: &[S], plane: usize, a: usize, cell: usize) -> [f64; 7] {
    std::array::from_fn(|j| reg[(a * BOX_DIM + j) * plane + cell].as_f64())
}

/// Maps a per-frame slice out of a batched `[N, C, H, W]` tensor.
pub fn frame_slice<S: Scalar>(t: &Tensor<S>, frame: usize) -> &[S] {
    let per = t.len() / t.dim(0);
    &t.data()[frame * per..(frame + 1) * per]
}
