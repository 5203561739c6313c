//! Class profiles and the flat `key = value` configuration format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::detector::{shape_chain, MiddleLayerSpec, NetworkSpec, RpnBlockSpec, RpnSpec, ScoreMode};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Interpolation, IouMode};
use crate::io_kitti::{ObjectClass, Range};
use crate::targets::{make_anchor_grid, AnchorGrid, AnchorSpec, MatchThresholds};
use crate::trainer::TrainConfig;
use crate::voxel::VoxelConfig;

/// Everything that determines the network and its targets for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub class: ObjectClass,
    pub voxel: VoxelConfig,
    pub network: NetworkSpec,
    pub anchor: AnchorSpec,
    pub matching: MatchThresholds,
    /// Keep only points that project into the camera image.
    pub frustum: bool,
}

impl ModelConfig {
    pub fn grid_dims(&self) -> Result<[usize; 3]> {
        self.voxel.grid_dims()
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        let chain = shape_chain(&self.network, self.grid_dims()?)?;
        let s = &chain.iter().find(|(n, _)| n == "score").expect("chain has a score entry").1;
        Ok(make_anchor_grid(&self.anchor, &self.voxel.range, s[1], s[2]))
    }
}

/// The three middle convolutions, which bring a depth of 10 down to 2.
pub fn standard_middle(c_in: usize, c: usize) -> Vec<MiddleLayerSpec> {
    vec![
        MiddleLayerSpec { c_in, c_out: c, kernel: 3, stride: [2, 1, 1], padding: [1, 1, 1] },
        MiddleLayerSpec { c_in: c, c_out: c, kernel: 3, stride: [1, 1, 1], padding: [0, 1, 1] },
        MiddleLayerSpec { c_in: c, c_out: c, kernel: 3, stride: [2, 1, 1], padding: [1, 1, 1] },
    ]
}

fn rpn(first_stride: usize, channels: [usize; 3], convs: [usize; 3], up: usize) -> RpnSpec {
    RpnSpec {
        blocks: (0..3)
            .map(|i| RpnBlockSpec { stride: if i == 0 { first_stride } else { 2 }, repeats: convs[i], channels: channels[i] })
            .collect(),
        up_channels: vec![up; 3],
        anchors_per_cell: 2,
        score_mode: ScoreMode::Sigmoid,
    }
}

fn full_network(first_stride: usize) -> NetworkSpec {
    NetworkSpec {
        vfe: vec![(7, 32), (32, 128)],
        vfe_out: 128,
        middle: standard_middle(128, 64),
        rpn: rpn(first_stride, [128, 128, 256], [3, 5, 5], 256),
    }
}

fn range(zyx: [f64; 6]) -> Range {
    Range::from_zyx(zyx).expect("profile ranges are ordered")
}

impl ModelConfig {
    pub fn car() -> Self {
        ModelConfig {
            class: ObjectClass::Car,
            voxel: VoxelConfig {
                range: range([-3.0, 1.0, -40.0, 40.0, 0.0, 70.4]),
                voxel_size: [0.4, 0.2, 0.2],
                max_points: 35,
                max_voxels: 20000,
                seed: 0,
            },
            network: full_network(2),
            anchor: AnchorSpec::with_two_rotations(3.9, 1.6, 1.56, -1.0),
            matching: MatchThresholds { positive: 0.6, negative: 0.45 },
            frustum: false,
        }
    }

    pub fn pedestrian() -> Self {
        ModelConfig {
            class: ObjectClass::Pedestrian,
            voxel: VoxelConfig {
                range: range([-3.0, 1.0, -20.0, 20.0, 0.0, 48.0]),
                voxel_size: [0.4, 0.2, 0.2],
                max_points: 45,
                max_voxels: 12000,
                seed: 0,
            },
            network: full_network(1),
            anchor: AnchorSpec::with_two_rotations(0.8, 0.6, 1.73, -0.6),
            matching: MatchThresholds { positive: 0.5, negative: 0.35 },
            frustum: false,
        }
    }

    pub fn cyclist() -> Self {
        ModelConfig {
            class: ObjectClass::Cyclist,
            anchor: AnchorSpec::with_two_rotations(1.76, 0.6, 1.73, -0.6),
            ..Self::pedestrian()
        }
    }

    /// Reduced car model: a 16 m square range on an 80x80 grid with quartered widths.
    pub fn desk() -> Self {
        ModelConfig {
            voxel: VoxelConfig {
                range: range([-3.0, 1.0, -8.0, 8.0, 0.0, 16.0]),
                voxel_size: [0.4, 0.2, 0.2],
                max_points: 35,
                max_voxels: 6400,
                seed: 0,
            },
            network: NetworkSpec {
                vfe: vec![(7, 8), (8, 32)],
                vfe_out: 32,
                middle: standard_middle(32, 16),
                rpn: rpn(2, [32, 32, 64], [3, 5, 5], 64),
            },
            ..Self::car()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "car" => Ok(Self::car()),
            "pedestrian" => Ok(Self::pedestrian()),
            "cyclist" => Ok(Self::cyclist()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown profile `{other}` (car, pedestrian, cyclist, desk)"))),
        }
    }
}

/// Post-processing and evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    pub mode: IouMode,
    pub interpolation: Interpolation,
    pub nms_iou: f64,
    pub score_threshold: f64,
}

impl EvalSettings {
    pub fn for_class(class: ObjectClass) -> Self {
        let e = EvalConfig::for_class(class, IouMode::Bev);
        EvalSettings {
            iou_threshold: e.iou_threshold,
            mode: e.mode,
            interpolation: e.interpolation,
            nms_iou: 0.1,
            score_threshold: 0.5,
        }
    }

    pub fn eval_config(&self, class: ObjectClass) -> EvalConfig {
        EvalConfig { class, iou_threshold: self.iou_threshold, mode: self.mode, interpolation: self.interpolation }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub profile: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub aug: AugmentConfig,
    pub eval: EvalSettings,
}

impl Config {
    pub fn from_profile(name: &str) -> Result<Self> {
        let model = ModelConfig::profile(name)?;
        let mut train = TrainConfig::default();
        let mut aug = AugmentConfig::default();
        if name == "desk" {
            train = TrainConfig::desk();
            aug = AugmentConfig::disabled();
        }
        Ok(Config { profile: name.into(), seed: 0, eval: EvalSettings::for_class(model.class), model, train, aug })
    }

    /// Parses `key = value` lines; `#` starts a comment. A `profile` key, if
    /// present, picks the base before the other keys are applied in order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let profile = pairs.iter().rev().find(|(_, k, _)| k == "profile").map_or("car", |(_, _, v)| v.as_str());
        let mut cfg = Config::from_profile(profile)?;
        for (line, k, v) in &pairs {
            if k != "profile" {
                cfg.set(k, v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Applies one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let net = &mut m.network;
        match key {
            "seed" => self.seed = num(key, value)?,
            "class" => m.class = value.parse()?,
            "voxel.range" => m.voxel.range = Range::from_zyx(array(key, value)?)?,
            "voxel.size" => m.voxel.voxel_size = array(key, value)?,
            "voxel.max_points" => m.voxel.max_points = num(key, value)?,
            "voxel.max_voxels" => m.voxel.max_voxels = num(key, value)?,
            "vfe.layers" => {
                net.vfe = value
                    .split(',')
                    .map(|p| {
                        let (a, b) = p
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("{key}: expected `in:out` pairs, got `{p}`")))?;
                        Ok((num(key, a)?, num(key, b)?))
                    })
                    .collect::<Result<_>>()?
            }
            "vfe.out" => {
                net.vfe_out = num(key, value)?;
                if let Some(first) = net.middle.first_mut() {
                    first.c_in = net.vfe_out;
                }
            }
            "middle.channels" => {
                let c = num(key, value)?;
                let c_in = net.middle.first().map_or(net.vfe_out, |l| l.c_in);
                net.middle = standard_middle(c_in, c);
            }
            "rpn.channels" => {
                for (b, c) in net.rpn.blocks.iter_mut().zip(list::<usize>(key, value, 3)?) {
                    b.channels = c;
                }
            }
            "rpn.convs" => {
                for (b, c) in net.rpn.blocks.iter_mut().zip(list::<usize>(key, value, 3)?) {
                    b.repeats = c;
                }
            }
            "rpn.first_stride" => net.rpn.blocks[0].stride = num(key, value)?,
            "rpn.up_channels" => net.rpn.up_channels = list(key, value, 3)?,
            "head.score" => {
                net.rpn.score_mode = match value {
                    "sigmoid" => ScoreMode::Sigmoid,
                    "softmax2" => ScoreMode::Softmax2,
                    _ => return Err(Error::Config(format!("{key}: expected sigmoid or softmax2, got `{value}`"))),
                }
            }
            "anchor.size" => {
                let [l, w, h] = array(key, value)?;
                (m.anchor.l, m.anchor.w, m.anchor.h) = (l, w, h);
            }
            "anchor.z" => m.anchor.z = num(key, value)?,
            "match.pos_iou" => m.matching.positive = num(key, value)?,
            "match.neg_iou" => m.matching.negative = num(key, value)?,
            "frustum.enable" => m.frustum = flag(key, value)?,
            "train.lr" => self.train.lr = num(key, value)?,
            "train.lr_late" => self.train.lr_late = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.decay_epoch" => self.train.decay_epoch = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.momentum" => self.train.momentum = num(key, value)?,
            "train.bn_momentum" => self.train.bn_momentum = num(key, value)?,
            "aug.enable_perturb" => self.aug.perturb = flag(key, value)?,
            "aug.enable_scale" => self.aug.scale = flag(key, value)?,
            "aug.enable_rotate" => self.aug.rotate = flag(key, value)?,
            "eval.iou" => self.eval.iou_threshold = num(key, value)?,
            "eval.mode" => {
                self.eval.mode = match value {
                    "bev" => IouMode::Bev,
                    "3d" => IouMode::ThreeD,
                    _ => return Err(Error::Config(format!("{key}: expected bev or 3d, got `{value}`"))),
                }
            }
            "eval.interp" => {
                self.eval.interpolation = match value {
                    "11" => Interpolation::Eleven,
                    "40" => Interpolation::Forty,
                    _ => return Err(Error::Config(format!("{key}: expected 11 or 40, got `{value}`"))),
                }
            }
            "eval.nms_iou" => self.eval.nms_iou = num(key, value)?,
            "eval.score_threshold" => self.eval.score_threshold = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr_late > 0.0) || t.batch_size == 0 || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config("train: need lr > 0, batch_size >= 1, momentum in [0, 1)".into()));
        }
        let th = self.model.matching;
        if !(0.0 <= th.negative && th.negative <= th.positive && th.positive <= 1.0) {
            return Err(Error::Config(format!("match thresholds {} / {} are not ordered in [0, 1]", th.negative, th.positive)));
        }
        let e = &self.eval;
        if !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("eval.iou {} is outside (0, 1]", e.iou_threshold)));
        }
        if self.model.voxel.max_points == 0 || self.model.voxel.max_voxels == 0 {
            return Err(Error::Config("voxel.max_points and voxel.max_voxels must be positive".into()));
        }
        self.model.anchor_grid()?;
        let grid = self.model.grid_dims()?;
        self.model.network.rpn.head_dims(grid[1], grid[2])?;
        Ok(())
    }

    /// Every key with its current value, in a form `parse` reads back.
    pub fn snapshot(&self) -> String {
        let m = &self.model;
        let net = &m.network;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let joinf = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("profile", self.profile.clone());
        kv("seed", self.seed.to_string());
        kv("class", m.class.kitti_name().to_lowercase());
        kv("voxel.range", joinf(&m.voxel.range.to_zyx()));
        kv("voxel.size", joinf(&m.voxel.voxel_size));
        kv("voxel.max_points", m.voxel.max_points.to_string());
        kv("voxel.max_voxels", m.voxel.max_voxels.to_string());
        kv("vfe.layers", net.vfe.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(","));
        kv("vfe.out", net.vfe_out.to_string());
        kv("middle.channels", net.middle.last().map_or(0, |l| l.c_out).to_string());
        kv("rpn.channels", join(&net.rpn.blocks.iter().map(|b| b.channels).collect::<Vec<_>>()));
        kv("rpn.convs", join(&net.rpn.blocks.iter().map(|b| b.repeats).collect::<Vec<_>>()));
        kv("rpn.first_stride", net.rpn.blocks[0].stride.to_string());
        kv("rpn.up_channels", join(&net.rpn.up_channels));
        kv("head.score", if net.rpn.score_mode == ScoreMode::Sigmoid { "sigmoid" } else { "softmax2" }.into());
        kv("anchor.size", joinf(&[m.anchor.l, m.anchor.w, m.anchor.h]));
        kv("anchor.z", m.anchor.z.to_string());
        kv("match.pos_iou", m.matching.positive.to_string());
        kv("match.neg_iou", m.matching.negative.to_string());
        kv("frustum.enable", m.frustum.to_string());
        let t = &self.train;
        kv("train.lr", t.lr.to_string());
        kv("train.lr_late", t.lr_late.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.decay_epoch", t.decay_epoch.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.bn_momentum", t.bn_momentum.to_string());
        kv("aug.enable_perturb", self.aug.perturb.to_string());
        kv("aug.enable_scale", self.aug.scale.to_string());
        kv("aug.enable_rotate", self.aug.rotate.to_string());
        let e = &self.eval;
        kv("eval.iou", e.iou_threshold.to_string());
        kv("eval.mode", if e.mode == IouMode::Bev { "bev" } else { "3d" }.into());
        kv("eval.interp", if e.interpolation == Interpolation::Eleven { "11" } else { "40" }.into());
        kv("eval.nms_iou", e.nms_iou.to_string());
        kv("eval.score_threshold", e.score_threshold.to_string());
        s
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

fn list<T: FromStr>(key: &str, value: &str, n: usize) -> Result<Vec<T>> {
    let v: Vec<T> = value.split(',').map(|p| num(key, p)).collect::<Result<_>>()?;
    if v.len() != n {
        return Err(Error::Config(format!("{key}: expected {n} comma-separated values, got {}", v.len())));
    }
    Ok(v)
}

fn array<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let v = list::<f64>(key, value, N)?;
    Ok(std::array::from_fn(|i| v[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_grids_and_heads() {
        for (name, grid, anchors) in [
            ("car", [10, 400, 352], 200 * 176 * 2),
            ("pedestrian", [10, 200, 240], 200 * 240 * 2),
            ("cyclist", [10, 200, 240], 200 * 240 * 2),
            ("desk", [10, 80, 80], 40 * 40 * 2),
        ] {
            let c = Config::from_profile(name).unwrap();
            c.validate().unwrap();
            assert_eq!(c.model.grid_dims().unwrap(), grid, "{name}");
            assert_eq!(c.model.anchor_grid().unwrap().len(), anchors, "{name}");
        }
        assert_eq!(Config::from_profile("car").unwrap().eval.iou_threshold, 0.7);
        assert_eq!(Config::from_profile("cyclist").unwrap().eval.iou_threshold, 0.5);
        assert!(Config::from_profile("truck").is_err());
    }

    #[test]
    fn parse_overrides_and_snapshot_roundtrip() {
        let c = Config::parse(
            "# desk run\nprofile = desk\nseed = 7\ntrain.lr = 0.05 # faster\nhead.score = softmax2\neval.interp = 40\nrpn.channels = 16,16,32\n",
        )
        .unwrap();
        assert_eq!((c.seed, c.train.lr), (7, 0.05));
        assert_eq!(c.model.network.rpn.score_mode, ScoreMode::Softmax2);
        assert_eq!(c.model.network.rpn.blocks[2].channels, 32);
        assert_eq!(Config::parse(&c.snapshot()).unwrap(), c);
        for name in ["car", "pedestrian", "cyclist", "desk"] {
            let c = Config::from_profile(name).unwrap();
            assert_eq!(Config::parse(&c.snapshot()).unwrap(), c, "{name}");
        }
    }

    #[test]
    fn parse_errors() {
        for bad in [
            "nonsense",
            "voxel.size = 0.4,0.2",
            "unknown.key = 1",
            "train.lr = 0",
            "voxel.size = 0.3,0.2,0.2",
            "eval.mode = volumetric",
            "match.pos_iou = 0.2",
        ] {
            assert!(matches!(Config::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
