//! SGD training loop, synthetic scenes, and the inference path shared with the CLI.

use std::f64::consts::PI;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{augment_scene, sample_seed, AugmentConfig, Scene};
use crate::config::{Config, EvalSettings, ModelConfig};
use crate::detector::{FrameInput, VoxelNet};
use crate::error::{Error, Result};
use crate::eval::{decode_detections, nms_bev, Detection};
use crate::geometry::{footprints_collide, Box3D};
use crate::io_kitti::{
    filter_by_image_frustum, list_frames, load_labels, load_pointcloud, Calibration, Point, PointCloud,
};
use crate::nn::{Checkpoint, Mode, ParamKind, Parameters, Scalar, Tensor};
use crate::targets::{frame_slice, match_anchors, total_loss, AnchorGrid, LossBreakdown, LossWeights};
use crate::voxel::{augment_with_centroid, build_buffers, VoxelBuffers};

pub const LOSS_CSV_HEADER: &str = "step,loss,cls_pos,cls_neg,reg";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate from `decay_epoch` on.
    pub lr_late: f64,
    pub epochs: usize,
    pub decay_epoch: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub bn_momentum: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            lr_late: 0.001,
            epochs: 160,
            decay_epoch: 150,
            batch_size: 16,
            momentum: 0.0,
            bn_momentum: crate::nn::DEFAULT_MOMENTUM,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// 200 single-batch steps over a handful of scenes.
    pub fn desk() -> Self {
        TrainConfig { epochs: 200, decay_epoch: 200, batch_size: 4, momentum: 0.9, bn_momentum: 0.9, ..Default::default() }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.lr
        } else {
            self.lr_late
        }
    }
}

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone, Default)]
pub struct Sgd<S> {
    pub momentum: f64,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: Vec::new() }
    }

    /// `v = m v + g; w -= lr v` for every weight with a gradient.
    pub fn step(&mut self, model: &mut impl Parameters<S>, lr: f64) {
        let (lr, m) = (S::from_f64_lossy(lr), S::from_f64_lossy(self.momentum));
        let velocity = &mut self.velocity;
        let mut i = 0;
        model.visit("", &mut |_, t, kind| {
            if kind != ParamKind::Weight {
                return;
            }
            if velocity.len() <= i {
                velocity.push(vec![S::zero(); t.len()]);
            }
            if let Some(g) = t.grad().map(<[S]>::to_vec) {
                let v = &mut velocity[i];
                for ((w, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = m * *v + g;
                    *w -= lr * *v;
                }
            }
            i += 1;
        });
    }

    fn save(&self, ck: &mut Checkpoint) {
        for (i, v) in self.velocity.iter().enumerate() {
            ck.push(&format!("sgd.velocity.{i}"), &[v.len()], v.iter().map(|x| x.as_f64() as f32).collect());
        }
    }

    fn load(&mut self, ck: &Checkpoint) {
        self.velocity = (0..)
            .map_while(|i| ck.get(&format!("sgd.velocity.{i}")))
            .map(|e| e.data.iter().map(|&x| S::from_f64_lossy(x as f64)).collect())
            .collect();
    }
}

/// Boxes of the model's class whose centers fall inside its range.
pub fn boxes_in_range(scene: &Scene, model: &ModelConfig) -> Vec<Box3D> {
    scene
        .boxes
        .iter()
        .zip(&scene.classes)
        .filter(|(b, &c)| c == model.class && model.voxel.range.contains_bev(b.x, b.y))
        .map(|(b, _)| *b)
        .collect()
}

/// Voxel buffers with centroid offsets, sampling points with `seed`.
pub fn voxelize(cloud: &PointCloud, model: &ModelConfig, seed: u64) -> Result<VoxelBuffers> {
    let mut cfg = model.voxel.clone();
    cfg.seed = seed;
    let mut buf = build_buffers(cloud, &cfg)?;
    augment_with_centroid(&mut buf);
    Ok(buf)
}

/// One training sample after augmentation and voxelization.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub input: FrameInput<f32>,
    pub boxes: Vec<Box3D>,
}

pub fn prepare_frame(scene: &Scene, model: &ModelConfig, aug: &AugmentConfig, seed: u64) -> Result<PreparedFrame> {
    let scene = if aug.perturb || aug.scale || aug.rotate {
        augment_scene(scene, &mut ChaCha8Rng::seed_from_u64(seed), aug)
    } else {
        scene.clone()
    };
    let buf = voxelize(&scene.cloud, model, seed ^ 0x5eed)?;
    Ok(PreparedFrame { input: FrameInput::from_buffers(&buf), boxes: boxes_in_range(&scene, model) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the frames that had positives.
    pub loss: LossBreakdown,
    pub frames: usize,
    /// Frames without any positive anchor, left out of the loss.
    pub skipped: usize,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!("{},{:.9},{:.9},{:.9},{:.9}", self.step, l.total, l.cls_pos, l.cls_neg, l.reg)
    }
}

pub struct Trainer {
    pub config: Config,
    pub net: VoxelNet<f32>,
    pub anchors: AnchorGrid,
    sgd: Sgd<f32>,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut net = VoxelNet::new(&config.model.network, config.model.grid_dims()?, &mut rng)?;
        net.set_bn_momentum(config.train.bn_momentum);
        Ok(Trainer {
            config: config.clone(),
            net,
            anchors: config.model.anchor_grid()?,
            sgd: Sgd::new(config.train.momentum),
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    /// One SGD step on a batch; `indices` give each scene's dataset position for seeding.
    pub fn train_batch(&mut self, scenes: &[&Scene], indices: &[usize]) -> Result<StepRecord> {
        let cfg = &self.config;
        let (epoch, seed) = (self.epoch, cfg.seed);
        let frames: Vec<PreparedFrame> = scenes
            .par_iter()
            .zip(indices.par_iter())
            .map(|(s, &i)| prepare_frame(s, &cfg.model, &cfg.aug, sample_seed(seed, epoch as u64, i as u64)))
            .collect::<Result<_>>()?;
        let labels = frames
            .par_iter()
            .map(|f| match_anchors(&self.anchors, &f.boxes, cfg.model.matching))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<FrameInput<f32>> = frames.into_iter().map(|f| f.input).collect();

        let (out, tape) = self.net.forward(&inputs, Mode::Train)?;
        let valid: Vec<usize> = (0..inputs.len()).filter(|&i| labels[i].num_positive() > 0).collect();
        let mut record = StepRecord {
            step: self.step,
            epoch,
            lr: cfg.train.lr_at(epoch),
            loss: LossBreakdown::default(),
            frames: inputs.len(),
            skipped: inputs.len() - valid.len(),
        };
        self.step += 1;
        if valid.is_empty() {
            log::warn!("step {}: no frame in the batch has a positive anchor", record.step);
            return Ok(record);
        }
        let scale = 1.0 / valid.len() as f64;
        let mut g_score = vec![0.0f32; out.score.len()];
        let mut g_reg = vec![0.0f32; out.reg.len()];
        let (ps, pr) = (out.score.len() / inputs.len(), out.reg.len() / inputs.len());
        for &i in &valid {
            let (loss, gs, gr) = total_loss(
                frame_slice(&out.score, i),
                frame_slice(&out.reg, i),
                &self.anchors,
                &labels[i],
                cfg.model.network.rpn.score_mode,
                cfg.train.weights,
                scale,
            )?;
            record.loss.accumulate(&loss, scale);
            g_score[i * ps..(i + 1) * ps].copy_from_slice(&gs);
            g_reg[i * pr..(i + 1) * pr].copy_from_slice(&gr);
        }
        if !record.loss.total.is_finite() {
            return Err(Error::Diverged { step: record.step, loss: record.loss.total });
        }
        crate::nn::checkpoint::zero_grads(&mut self.net);
        let g_score = Tensor::from_vec(out.score.shape(), g_score)?;
        let g_reg = Tensor::from_vec(out.reg.shape(), g_reg)?;
        self.net.backward(&tape, &g_score, &g_reg)?;
        self.sgd.step(&mut self.net, record.lr);
        Ok(record)
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn run_epoch(&mut self, data: &[Scene]) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(self.config.seed, self.epoch as u64, u64::MAX)));
        let mut records = Vec::new();
        for chunk in order.chunks(self.config.train.batch_size) {
            let scenes: Vec<&Scene> = chunk.iter().map(|&i| &data[i]).collect();
            let r = self.train_batch(&scenes, chunk)?;
            log::debug!("epoch {} step {}: loss {:.5}", r.epoch, r.step, r.loss.total);
            records.push(r);
        }
        self.epoch += 1;
        self.history.extend_from_slice(&records);
        Ok(records)
    }

    /// Runs the remaining epochs. With `out`, appends to `loss.csv` and writes
    /// `checkpoint_e{N}.vxnc` at the learning-rate boundary and `model.vxnc` at the end.
    pub fn fit(&mut self, data: &[Scene], out: Option<&Path>) -> Result<()> {
        let mut csv = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
                let path = dir.join("loss.csv");
                let fresh = self.step == 0 || !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
                if fresh {
                    writeln!(f, "{LOSS_CSV_HEADER}").map_err(|e| Error::io("writing loss.csv", e))?;
                }
                Some(f)
            }
            None => None,
        };
        while self.epoch < self.config.train.epochs {
            let records = self.run_epoch(data)?;
            if let Some(f) = csv.as_mut() {
                for r in &records {
                    writeln!(f, "{}", r.csv_line()).map_err(|e| Error::io("writing loss.csv", e))?;
                }
            }
            if let Some(dir) = out {
                let boundary = self.config.train.decay_epoch;
                if self.epoch == boundary && boundary < self.config.train.epochs {
                    self.checkpoint().save(&dir.join(format!("checkpoint_e{boundary}.vxnc")))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("model.vxnc"))?;
        }
        Ok(())
    }

    /// Weights, running statistics, optimizer state and progress.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut ck = Checkpoint::capture(&mut self.net);
        self.sgd.save(&mut ck);
        ck.push("trainer.progress", &[2], vec![self.epoch as f32, self.step as f32]);
        ck
    }

    pub fn resume(config: &Config, ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        ck.restore(&mut t.net)?;
        t.sgd.load(ck);
        if let Some(p) = ck.get("trainer.progress") {
            t.epoch = p.data[0] as usize;
            t.step = p.data[1] as usize;
        }
        Ok(t)
    }
}

/// A scene of 1 to 4 non-colliding boxes of the model's class, each filled
/// with 50 to 300 points on its sides and top, over a flat ground plane.
pub fn make_synthetic_scene(rng: &mut impl Rng, model: &ModelConfig) -> Scene {
    let r = &model.voxel.range;
    let a = &model.anchor;
    let ground = a.z - a.h / 2.0;
    let n = rng.random_range(1..=4);
    let mut boxes: Vec<Box3D> = Vec::new();
    for _ in 0..200 {
        if boxes.len() == n {
            break;
        }
        let (l, w, h) = (a.l * rng.random_range(0.9..1.1), a.w * rng.random_range(0.9..1.1), a.h * rng.random_range(0.9..1.1));
        let margin = 0.5 * l.hypot(w) + 0.2;
        if r.x.1 - r.x.0 <= 2.0 * margin || r.y.1 - r.y.0 <= 2.0 * margin {
            break;
        }
        let b = Box3D::new(
            rng.random_range(r.x.0 + margin..r.x.1 - margin),
            rng.random_range(r.y.0 + margin..r.y.1 - margin),
            ground + h / 2.0,
            l,
            w,
            h,
            rng.random_range(-PI..PI),
        );
        let grown = Box3D { l: b.l + 0.4, w: b.w + 0.4, ..b };
        if boxes.iter().all(|o| !footprints_collide(&grown, o)) {
            boxes.push(b);
        }
    }

    let mut points = Vec::new();
    for b in &boxes {
        let (hl, hw, hh) = (0.49 * b.l, 0.49 * b.w, 0.49 * b.h);
        // sides +-x, +-y and the top, chosen by area
        let areas = [b.w * b.h, b.w * b.h, b.l * b.h, b.l * b.h, b.l * b.w];
        let total: f64 = areas.iter().sum();
        for _ in 0..rng.random_range(50..=300) {
            let mut pick = rng.random_range(0.0..total);
            let face = areas.iter().position(|&s| {
                pick -= s;
                pick < 0.0
            });
            let (u, v, t) = (rng.random_range(-hl..hl), rng.random_range(-hw..hw), rng.random_range(-hh..hh));
            let q = match face.unwrap_or(4) {
                0 => [hl, v, t],
                1 => [-hl, v, t],
                2 => [u, hw, t],
                3 => [u, -hw, t],
                _ => [u, v, hh],
            };
            let p = b.from_local(q);
            points.push(Point::new(p[0], p[1], p[2], rng.random_range(0.0..1.0)));
        }
    }
    let area = (r.x.1 - r.x.0) * (r.y.1 - r.y.0);
    for _ in 0..((2.0 * area) as usize).clamp(200, 20000) {
        let z = ground - rng.random_range(0.02..0.1);
        points.push(Point::new(rng.random_range(r.x.0..r.x.1), rng.random_range(r.y.0..r.y.1), z, rng.random_range(0.0..0.3)));
    }
    Scene { cloud: PointCloud::new(points), classes: vec![model.class; boxes.len()], boxes }
}

/// `n` synthetic scenes, scene `i` drawn from its own seeded stream.
pub fn synthetic_dataset(n: usize, model: &ModelConfig, seed: u64) -> Vec<Scene> {
    (0..n)
        .map(|i| make_synthetic_scene(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, 0x5c3e, i as u64)), model))
        .collect()
}

/// A KITTI frame ready for the model: cloud (frustum-filtered if configured), calibration and boxes.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub name: String,
    pub scene: Scene,
    pub calib: Calibration,
}

/// Every frame under `root`; labels are required when `with_labels` is set.
pub fn load_kitti_dir(root: &Path, model: &ModelConfig, with_labels: bool) -> Result<Vec<LoadedFrame>> {
    list_frames(root)?
        .into_iter()
        .map(|f| {
            let calib = match &f.calib {
                Some(p) => Calibration::load(p)?,
                None if model.frustum => {
                    return Err(Error::Calibration(format!("frame {} has no calib file for frustum filtering", f.name)))
                }
                None => Calibration::axes_only(),
            };
            let (mut cloud, report) = load_pointcloud(&f.velodyne)?;
            if report.rejected > 0 {
                log::warn!("{}: {} non-finite points dropped", f.name, report.rejected);
            }
            if model.frustum {
                cloud = filter_by_image_frustum(&cloud, &calib)?;
            }
            let (boxes, classes) = match (&f.label, with_labels) {
                (Some(p), _) => {
                    let labels = load_labels(p, &calib)?;
                    (labels.boxes, labels.classes)
                }
                (None, true) => return Err(Error::Config(format!("frame {} has no label file", f.name))),
                (None, false) => (Vec::new(), Vec::new()),
            };
            Ok(LoadedFrame { name: f.name, scene: Scene { cloud, boxes, classes }, calib })
        })
        .collect()
}

/// Eval-mode detections for one cloud, after score thresholding and NMS.
pub fn detect(
    net: &mut VoxelNet<f32>,
    anchors: &AnchorGrid,
    cloud: &PointCloud,
    model: &ModelConfig,
    eval: &EvalSettings,
    seed: u64,
) -> Result<Vec<Detection>> {
    let buf = voxelize(cloud, model, seed)?;
    let (out, _) = net.forward(&[FrameInput::from_buffers(&buf)], Mode::Eval)?;
    let dets = decode_detections(
        out.score.data(),
        out.reg.data(),
        anchors,
        model.network.rpn.score_mode,
        eval.score_threshold,
        model.class,
    );
    Ok(nms_bev(&dets, eval.nms_iou))
}
