//! Invariant suites run by `voxelpipe selfcheck`: gradient checks, oracle
//! comparisons and roundtrips, each small enough to finish in seconds.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_scene, global_rotate, AugmentConfig, Sampler, Scene};
use crate::detector::{FrameInput, MiddleLayerSpec, NetworkSpec, RpnBlockSpec, RpnSpec, ScoreMode, VoxelNet};
use crate::error::Result;
use crate::eval::{average_precision, Difficulty, EvalConfig, EvalFrame, IouMode};
use crate::geometry::{bev_iou, Box3D};
use crate::io_kitti::{Calibration, LabelRecord, ObjectClass, Point, PointCloud, Range};
use crate::nn::checkpoint::zero_grads;
use crate::nn::gradcheck::scalarize;
use crate::nn::{
    flatten_grads, flatten_weights, grad_check_at, load_weights, BatchNorm, Checkpoint, Conv, ConvGeometry,
    GradCheckReport, Linear, Mode, Parameters, SparseVolume, Tensor,
};
use crate::targets::{
    decode_residual, encode_residual, make_anchor_grid, match_anchors, total_loss, AnchorLabel, AnchorSpec,
    LossWeights, MatchThresholds,
};
use crate::vfe::FeatureNet;
use crate::voxel::{build_buffers_in_order, point_order, voxel_index, VoxelConfig, FEATURE_DIM};

pub type Outcome = std::result::Result<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub const SUITES: &[(&str, fn() -> Outcome)] = &[
    ("nn.linear.gradient", linear_gradient),
    ("nn.batchnorm.gradient", batchnorm_gradient),
    ("nn.conv3d.gradient", conv3d_gradient),
    ("nn.conv2d.gradient", conv2d_gradient),
    ("nn.deconv2d.gradient", deconv2d_gradient),
    ("nn.sparse_conv3d.equivalence", sparse_conv_equivalence),
    ("nn.checkpoint.roundtrip", checkpoint_roundtrip),
    ("voxel.two_pass_oracle", voxel_oracle),
    ("vfe.permutation", vfe_permutation),
    ("vfe.padding", vfe_padding),
    ("vfe.gradient", vfe_gradient),
    ("network.gradient", network_gradient),
    ("geometry.iou", geometry_iou),
    ("targets.residual_roundtrip", residual_roundtrip),
    ("targets.matching", matching_invariants),
    ("targets.loss", loss_reference),
    ("augment.contracts", augment_contracts),
    ("eval.fixture", eval_fixture),
];

/// Runs every suite whose name contains `filter`, in order.
pub fn run(filter: Option<&str>) -> Vec<SuiteReport> {
    SUITES
        .iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, suite)| {
            let (passed, detail) = match suite() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            SuiteReport { name: name.to_string(), passed, detail }
        })
        .collect()
}

/// Loads a checkpoint file, reporting the failing byte offset if it is corrupt.
pub fn check_checkpoint_file(path: &Path) -> SuiteReport {
    let (passed, detail) = match Checkpoint::load(path) {
        Ok(ck) => (true, format!("{} entries", ck.entries.len())),
        Err(e) => (false, e.to_string()),
    };
    SuiteReport { name: format!("checkpoint.load {}", path.display()), passed, detail }
}

fn verdict(r: GradCheckReport) -> Outcome {
    let msg = format!("{} coordinates, max rel err {:.2e} (tol {:.0e})", r.checked, r.max_rel_err, r.tolerance);
    if r.passed {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central differences on every `stride`-th weight; `loss(model, true)` must also run backward.
fn param_check<M: Parameters<f64>>(
    model: &mut M,
    mut loss: impl FnMut(&mut M, bool) -> Result<f64>,
    stride: usize,
    tol: f64,
) -> Outcome {
    zero_grads(model);
    loss(model, true).map_err(|e| e.to_string())?;
    let analytic = flatten_grads(model);
    let x = flatten_weights(model);
    let idx: Vec<usize> = (0..x.len()).step_by(stride.max(1)).collect();
    let report = grad_check_at(
        |w| {
            load_weights(model, w);
            loss(model, false).unwrap_or(f64::NAN)
        },
        &x,
        &analytic,
        &idx,
        1e-5,
        tol,
    );
    load_weights(model, &x);
    verdict(report)
}

fn linear_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m: Linear<f64> = Linear::new(5, 4, &mut rng);
    let x = rand_tensor(&[6, 5], &mut rng);
    let proj = rand_tensor(&[6, 4], &mut rng);
    param_check(
        &mut m,
        |m, back| {
            let y = m.forward(&x)?;
            if back {
                m.backward(&x, &proj)?;
            }
            Ok(scalarize(&y, &proj))
        },
        1,
        1e-4,
    )
}

fn batchnorm_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m: BatchNorm<f64> = BatchNorm::new(3);
    m.gamma = rand_tensor(&[3], &mut rng);
    let x = rand_tensor(&[4, 3, 5], &mut rng);
    let proj = rand_tensor(&[4, 3, 5], &mut rng);
    param_check(
        &mut m,
        |m, back| {
            let (y, cache) = m.forward(&x, 1, None, Mode::Train)?;
            if back {
                m.backward(&cache, &proj)?;
            }
            Ok(scalarize(&y, &proj))
        },
        1,
        1e-4,
    )
}

fn conv_check(mut conv: Conv<f64>, x_shape: &[usize], seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(x_shape, &mut rng);
    let out_shape = conv.output_shape(x_shape).map_err(|e| e.to_string())?;
    let proj = rand_tensor(&out_shape, &mut rng);
    param_check(
        &mut conv,
        |c, back| {
            let y = c.forward(&x)?;
            if back {
                c.backward(&x, &proj)?;
            }
            Ok(scalarize(&y, &proj))
        },
        1,
        1e-4,
    )
}

fn conv3d_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let geom = ConvGeometry::new([3; 3], [2, 1, 1], [1, 1, 1]);
    conv_check(Conv::conv3d(2, 3, geom, &mut rng), &[2, 2, 4, 4, 5], 3)
}

fn conv2d_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    conv_check(Conv::conv2d(2, 3, 3, 2, 1, &mut rng), &[2, 2, 6, 6], 4)
}

fn deconv2d_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    conv_check(Conv::deconv2d(2, 3, 2, 2, 0, &mut rng), &[2, 2, 3, 3], 5)
}

fn sparse_conv_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = [4, 6, 6];
    let conv: Conv<f64> = Conv::conv3d(3, 2, ConvGeometry::new([3; 3], [2, 1, 1], [1, 1, 1]), &mut rng);
    let mut cells: Vec<usize> = (0..144).collect();
    rand::seq::SliceRandom::shuffle(&mut cells[..], &mut rng);
    let coords: Vec<[usize; 3]> = cells[..20].iter().map(|&i| [i / 36, (i / 6) % 6, i % 6]).collect();
    let features = rand_tensor(&[20, 3], &mut rng);
    let mut dense = Tensor::zeros(&[1, 3, 4, 6, 6]);
    for (k, c) in coords.iter().enumerate() {
        for ch in 0..3 {
            dense.data_mut()[((ch * 4 + c[0]) * 6 + c[1]) * 6 + c[2]] = features.data()[k * 3 + ch];
        }
    }
    let sparse = conv.forward_sparse(&SparseVolume { features, coords, grid }).map_err(|e| e.to_string())?;
    let full = conv.forward(&dense).map_err(|e| e.to_string())?;
    let diff = sparse.data().iter().zip(full.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(diff < 1e-12, format!("sparse and dense outputs differ by {diff:e}"))?;
    Ok(format!("max abs diff {diff:.1e}"))
}

fn checkpoint_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = [10, 8, 8];
    let mut a: VoxelNet<f32> = VoxelNet::new(&tiny_spec(), grid, &mut rng).map_err(|e| e.to_string())?;
    let mut b: VoxelNet<f32> = VoxelNet::new(&tiny_spec(), grid, &mut rng).map_err(|e| e.to_string())?;
    let bytes = Checkpoint::capture(&mut a).to_bytes();
    Checkpoint::from_bytes(&bytes).and_then(|c| c.restore(&mut b)).map_err(|e| e.to_string())?;
    ensure(Checkpoint::capture(&mut b).to_bytes() == bytes, "restored weights differ")?;
    let mut broken = bytes.clone();
    broken.truncate(bytes.len() / 2);
    match Checkpoint::from_bytes(&broken) {
        Err(crate::Error::Checkpoint { offset, .. }) => Ok(format!("{} bytes; truncation detected at offset {offset}", bytes.len())),
        other => Err(format!("truncated checkpoint not rejected: {other:?}")),
    }
}

fn voxel_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for (round, (t, k)) in [(35, 20000), (5, 3000), (2, 40)].into_iter().enumerate() {
        let cfg = VoxelConfig {
            range: Range::from_zyx([-3.0, 1.0, -8.0, 8.0, 0.0, 16.0]).expect("ordered"),
            voxel_size: [0.4, 0.2, 0.2],
            max_points: t,
            max_voxels: k,
            seed: round as u64,
        };
        let n = rng.random_range(1000..20000);
        let points = (0..n)
            .map(|_| {
                // clustered so that voxels overflow
                let (cx, cy) = (rng.random_range(0..6) as f64 * 2.5, rng.random_range(-3..3) as f64 * 2.5);
                Point::new(cx + rng.random_range(-1.0..1.0), cy + rng.random_range(-1.0..1.0), rng.random_range(-3.2..1.2), 0.5)
            })
            .collect();
        let cloud = PointCloud::new(points);
        let order = point_order(n, cfg.seed);
        let buf = build_buffers_in_order(&cloud, &cfg, &order).map_err(|e| e.to_string())?;
        // bucket everything first, then keep the first K buckets and first T points of each
        let dims = cfg.grid_dims().map_err(|e| e.to_string())?;
        let mut buckets: Vec<([usize; 3], Vec<usize>)> = Vec::new();
        let mut slot: HashMap<[usize; 3], usize> = HashMap::new();
        for &i in &order {
            let p = &cloud.points[i];
            if !cfg.range.contains(p) {
                continue;
            }
            let c = voxel_index(p, &cfg, dims);
            let s = *slot.entry(c).or_insert_with(|| {
                buckets.push((c, Vec::new()));
                buckets.len() - 1
            });
            buckets[s].1.push(i);
        }
        buckets.truncate(k);
        ensure(buf.num_voxels() == buckets.len(), format!("{} voxels, oracle {}", buf.num_voxels(), buckets.len()))?;
        for (v, (c, members)) in buckets.iter().enumerate() {
            let got = &buf.sources[v * t..v * t + buf.counts[v]];
            ensure(buf.coords[v] == *c && got == &members[..members.len().min(t)], format!("voxel {v} differs from the oracle"))?;
        }
        checked += n;
    }
    Ok(format!("{checked} points over 3 clouds"))
}

fn random_voxels(rng: &mut ChaCha8Rng, k: usize, t: usize) -> (Tensor<f64>, Vec<usize>) {
    let counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..=t)).collect();
    let mut x = Tensor::zeros(&[k, t, FEATURE_DIM]);
    for (v, &n) in counts.iter().enumerate() {
        for i in 0..n * FEATURE_DIM {
            x.data_mut()[v * t * FEATURE_DIM + i] = rng.random_range(-1.0..1.0);
        }
    }
    (x, counts)
}

fn vfe_permutation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net: FeatureNet<f64> = FeatureNet::new(&[(7, 8), (8, 16)], 16, &mut rng).map_err(|e| e.to_string())?;
    let (x, counts) = random_voxels(&mut rng, 50, 6);
    let (base, _) = net.forward(x.clone(), &counts, Mode::Eval).map_err(|e| e.to_string())?;
    let mut y = x.clone();
    for (v, &n) in counts.iter().enumerate() {
        let mut rows: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut rows[..], &mut rng);
        for (dst, &src) in rows.iter().enumerate() {
            for c in 0..FEATURE_DIM {
                y.data_mut()[(v * 6 + dst) * FEATURE_DIM + c] = x.data()[(v * 6 + src) * FEATURE_DIM + c];
            }
        }
    }
    let (perm, _) = net.forward(y, &counts, Mode::Eval).map_err(|e| e.to_string())?;
    let err = max_rel(base.data(), perm.data());
    ensure(err <= 1e-6, format!("permuted voxels differ by {err:e}"))?;
    Ok(format!("50 voxels, max rel err {err:.1e}"))
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3)).fold(0.0, f64::max)
}

fn vfe_padding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut net: FeatureNet<f64> = FeatureNet::new(&[(7, 8), (8, 16)], 16, &mut rng).map_err(|e| e.to_string())?;
    let (x, counts) = random_voxels(&mut rng, 30, 4);
    let mut wide = Tensor::zeros(&[30, 9, FEATURE_DIM]);
    for v in 0..30 {
        let row = 4 * FEATURE_DIM;
        wide.data_mut()[v * 9 * FEATURE_DIM..v * 9 * FEATURE_DIM + row].copy_from_slice(&x.data()[v * row..(v + 1) * row]);
    }
    let (a, _) = net.forward(x, &counts, Mode::Eval).map_err(|e| e.to_string())?;
    let (b, _) = net.forward(wide, &counts, Mode::Eval).map_err(|e| e.to_string())?;
    let err = max_rel(a.data(), b.data());
    ensure(err <= 1e-6, format!("extra padding changed features by {err:e}"))?;
    Ok(format!("T 4 vs 9, max rel err {err:.1e}"))
}

fn vfe_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net: FeatureNet<f64> = FeatureNet::new(&[(7, 4), (4, 6)], 4, &mut rng).map_err(|e| e.to_string())?;
    let (x, counts) = random_voxels(&mut rng, 6, 4);
    let proj = rand_tensor(&[6, 4], &mut rng);
    param_check(
        &mut net,
        |n, back| {
            let (y, tape) = n.forward(x.clone(), &counts, Mode::Train)?;
            if back {
                n.backward(&tape, &counts, &proj)?;
            }
            Ok(scalarize(&y, &proj))
        },
        1,
        1e-4,
    )
}

fn tiny_spec() -> NetworkSpec {
    let m = |c_in, stride: [usize; 3], padding| MiddleLayerSpec { c_in, c_out: 3, kernel: 3, stride, padding };
    NetworkSpec {
        vfe: vec![(7, 4), (4, 6)],
        vfe_out: 4,
        middle: vec![m(4, [2, 1, 1], [1, 1, 1]), m(3, [1, 1, 1], [0, 1, 1]), m(3, [2, 1, 1], [1, 1, 1])],
        rpn: RpnSpec {
            blocks: vec![
                RpnBlockSpec { stride: 2, repeats: 1, channels: 4 },
                RpnBlockSpec { stride: 2, repeats: 0, channels: 4 },
                RpnBlockSpec { stride: 2, repeats: 0, channels: 4 },
            ],
            up_channels: vec![3, 3, 3],
            anchors_per_cell: 2,
            score_mode: ScoreMode::Sigmoid,
        },
    }
}

fn network_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let grid = [10, 8, 8];
    let mut net: VoxelNet<f64> = VoxelNet::new(&tiny_spec(), grid, &mut rng).map_err(|e| e.to_string())?;
    let frames: Vec<FrameInput<f64>> = (0..2)
        .map(|_| {
            let mut cells: Vec<usize> = (0..640).collect();
            rand::seq::SliceRandom::shuffle(&mut cells[..], &mut rng);
            let coords = cells[..12].iter().map(|&i| [i / 64, (i / 8) % 8, i % 8]).collect();
            let (features, counts) = random_voxels(&mut rng, 12, 3);
            FrameInput { features, counts, coords }
        })
        .collect();
    let (out, _) = net.forward(&frames, Mode::Train).map_err(|e| e.to_string())?;
    let ps = rand_tensor(out.score.shape(), &mut rng);
    let pr = rand_tensor(out.reg.shape(), &mut rng);
    param_check(
        &mut net,
        |n, back| {
            let (o, tape) = n.forward(&frames, Mode::Train)?;
            if back {
                n.backward(&tape, &ps, &pr)?;
            }
            Ok(scalarize(&o.score, &ps) + scalarize(&o.reg, &pr))
        },
        7,
        1e-3,
    )
}

fn geometry_iou() -> Outcome {
    let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
    let b = Box3D::new(1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
    ensure((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12, "axis-aligned overlap is not 1/3")?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut r = || Box3D::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0, rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), 1.0, rng.random_range(-3.2..3.2));
        let (p, q) = (r(), r());
        let n = 20000;
        let (lo, hi) = (-3.0, 3.0);
        let (mut inter, mut uni) = (0usize, 0usize);
        for _ in 0..n {
            let s = [rng.random_range(lo..hi), rng.random_range(lo..hi), 0.0];
            let (ip, iq) = (p.contains(s), q.contains(s));
            inter += (ip && iq) as usize;
            uni += (ip || iq) as usize;
        }
        let mc = if uni == 0 { 0.0 } else { inter as f64 / uni as f64 };
        worst = worst.max((mc - bev_iou(&p, &q)).abs());
    }
    ensure(worst <= 0.03, format!("Monte-Carlo disagreement {worst:.3}"))?;
    Ok(format!("100 rotated pairs, worst Monte-Carlo gap {worst:.4}"))
}

fn residual_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for i in 0..2000 {
        let anchor = Box3D::new(rng.random_range(0.0..70.0), rng.random_range(-40.0..40.0), -1.0, 3.9, 1.6, 1.56, if i % 2 == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 });
        let gt = Box3D::new(
            anchor.x + rng.random_range(-2.0..2.0),
            anchor.y + rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..0.0),
            rng.random_range(0.5..6.0),
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..3.0),
            rng.random_range(-3.1..3.1),
        );
        let back = decode_residual(&encode_residual(&gt, &anchor).map_err(|e| e.to_string())?, &anchor);
        for (a, b) in back.to_array().iter().zip(gt.to_array()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-9, format!("roundtrip error {worst:e}"))?;
    Ok(format!("2000 pairs, max error {worst:.1e}"))
}

fn random_gts(rng: &mut ChaCha8Rng, n: usize) -> Vec<Box3D> {
    (0..n)
        .map(|_| Box3D::new(rng.random_range(1.0..15.0), rng.random_range(-7.0..7.0), -1.0, rng.random_range(3.0..4.8), rng.random_range(1.4..2.0), 1.5, rng.random_range(-3.1..3.1)))
        .collect()
}

fn matching_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let range = Range::from_zyx([-3.0, 1.0, -8.0, 8.0, 0.0, 16.0]).expect("ordered");
    let grid = make_anchor_grid(&AnchorSpec::with_two_rotations(3.9, 1.6, 1.56, -1.0), &range, 20, 20);
    let th = MatchThresholds { positive: 0.6, negative: 0.45 };
    for _ in 0..10 {
        let n = rng.random_range(1..5);
        let gts = random_gts(&mut rng, n);
        let m = match_anchors(&grid, &gts, th).map_err(|e| e.to_string())?;
        for (g, _) in gts.iter().enumerate() {
            ensure(m.labels.contains(&AnchorLabel::Positive(g)), format!("gt {g} has no positive"))?;
        }
        for (i, l) in m.labels.iter().enumerate() {
            let best = gts.iter().map(|g| bev_iou(&grid.boxes[i], g)).fold(0.0, f64::max);
            match l {
                AnchorLabel::Negative => ensure(best < th.negative, format!("anchor {i} negative at IoU {best}"))?,
                AnchorLabel::DontCare => ensure(best >= th.negative && best <= th.positive, format!("anchor {i} don't-care at IoU {best}"))?,
                AnchorLabel::Positive(_) => {}
            }
        }
    }
    Ok("10 scenes".into())
}

fn loss_reference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let range = Range::from_zyx([-3.0, 1.0, -8.0, 8.0, 0.0, 16.0]).expect("ordered");
    let grid = make_anchor_grid(&AnchorSpec::with_two_rotations(3.9, 1.6, 1.56, -1.0), &range, 8, 8);
    let gts = random_gts(&mut rng, 2);
    let m = match_anchors(&grid, &gts, MatchThresholds { positive: 0.6, negative: 0.45 }).map_err(|e| e.to_string())?;
    let score: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
    let reg: Vec<f64> = (0..grid.len() * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (got, _, _) =
        total_loss(&score, &reg, &grid, &m, ScoreMode::Sigmoid, LossWeights::default(), 1.0).map_err(|e| e.to_string())?;
    let plane = 64;
    let p = |i: usize| 1.0 / (1.0 + (-score[i]).exp());
    let (mut pos, mut neg, mut r) = (0.0, 0.0, 0.0);
    let (mut np, mut nn) = (0, 0);
    for (i, l) in m.labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive(_) => {
                np += 1;
                pos -= p(i).ln();
            }
            AnchorLabel::Negative => {
                nn += 1;
                neg -= (1.0 - p(i)).ln();
            }
            AnchorLabel::DontCare => {}
        }
    }
    for (i, target) in &m.positives {
        for (j, t) in target.iter().enumerate() {
            let d = (reg[(i / plane * 7 + j) * plane + i % plane] - t).abs();
            r += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
        }
    }
    let want = 1.5 * pos / np as f64 + neg / nn.max(1) as f64 + r / np as f64;
    ensure((got.total - want).abs() <= 1e-6 * want.abs().max(1.0), format!("loss {} vs reference {want}", got.total))?;
    Ok(format!("loss {want:.6} matches the reference"))
}

struct Zero;

impl Sampler for Zero {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo <= 1.0 && 1.0 <= hi && lo > 0.0 {
            1.0
        } else {
            0.0
        }
    }

    fn normal(&mut self, _mean: f64, _std: f64) -> f64 {
        0.0
    }
}

fn augment_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let boxes = random_gts(&mut rng, 2);
    let points = (0..300).map(|_| Point::new(rng.random_range(0.0..16.0), rng.random_range(-8.0..8.0), rng.random_range(-2.0..0.0), 0.1)).collect();
    let scene = Scene { cloud: PointCloud::new(points), classes: vec![ObjectClass::Car; 2], boxes };
    let same = augment_scene(&scene, &mut Zero, &AugmentConfig::default());
    ensure(same == scene, "zero draws changed the scene")?;
    let rotated = global_rotate(&scene, &mut rng, &AugmentConfig::default());
    let mut worst: f64 = 0.0;
    for i in (0..300).step_by(7) {
        for j in (0..300).step_by(11) {
            let d = |s: &Scene| {
                let (a, b) = (s.cloud.points[i].xyz(), s.cloud.points[j].xyz());
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            };
            worst = worst.max((d(&scene) - d(&rotated)).abs());
        }
    }
    ensure(worst <= 1e-6, format!("rotation changed a distance by {worst:e}"))?;
    Ok(format!("identity exact, rotation distance drift {worst:.1e}"))
}

fn eval_fixture() -> Outcome {
    let calib = Calibration::axes_only();
    let rec = |x: f64, score: Option<f64>| {
        let mut r = LabelRecord::from_lidar_box(ObjectClass::Car, &Box3D::new(x, 0.0, -1.0, 3.9, 1.6, 1.5, 0.0), &calib, score);
        r.bbox = [0.0, 0.0, 100.0, 100.0];
        r.truncated = 0.0;
        r.occluded = 0;
        r
    };
    // by score: TP, FP, TP, TP, FP; one of five cars missed
    let frames: Vec<EvalFrame> = [(10.0, 10.0, 0.9), (20.0, 40.0, 0.8), (15.0, 15.0, 0.7), (25.0, 25.0, 0.6), (30.0, 5.0, 0.5)]
        .iter()
        .map(|&(g, d, s)| EvalFrame { gts: vec![rec(g, None)], dets: vec![rec(d, Some(s))] })
        .collect();
    let ap = average_precision(&frames, &EvalConfig::for_class(ObjectClass::Car, IouMode::Bev), &Difficulty::MODERATE).ap;
    ensure((ap - 6.0 / 11.0).abs() <= 1e-6, format!("AP {ap} vs 6/11"))?;
    Ok(format!("AP {ap:.6}"))
}
