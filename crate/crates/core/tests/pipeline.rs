use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxelnet::augment::Scene;
use voxelnet::config::Config;
use voxelnet::eval::{average_precision, format_results, read_records, Difficulty, EvalFrame};
use voxelnet::geometry::bev_iou;
use voxelnet::io_kitti::{encode_pointcloud, Calibration, LabelRecord};
use voxelnet::nn::Checkpoint;
use voxelnet::trainer::{detect, load_kitti_dir, make_synthetic_scene, synthetic_dataset, Trainer};

fn tiny_config() -> Config {
    let mut c = Config::from_profile("desk").unwrap();
    for (k, v) in [
        ("vfe.layers", "7:4,4:8"),
        ("vfe.out", "8"),
        ("middle.channels", "4"),
        ("rpn.channels", "4,4,8"),
        ("rpn.convs", "1,1,1"),
        ("rpn.up_channels", "4,4,4"),
        ("train.batch_size", "2"),
        ("train.epochs", "2"),
        ("eval.score_threshold", "0.0"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn write_frame(root: &Path, name: &str, scene: &Scene) {
    for d in ["velodyne", "label_2"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    fs::write(root.join("velodyne").join(format!("{name}.bin")), encode_pointcloud(&scene.cloud)).unwrap();
    let calib = Calibration::axes_only();
    let mut text = String::new();
    for (b, c) in scene.boxes.iter().zip(&scene.classes) {
        text.push_str(&LabelRecord::from_lidar_box(*c, b, &calib, None).to_line());
        text.push('\n');
    }
    fs::write(root.join("label_2").join(format!("{name}.txt")), text).unwrap();
}

#[test]
fn kitti_directory_roundtrip() {
    let c = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let scenes = synthetic_dataset(3, &c.model, 5);
    for (i, s) in scenes.iter().enumerate() {
        write_frame(dir.path(), &format!("{i:06}"), s);
    }
    let frames = load_kitti_dir(dir.path(), &c.model, true).unwrap();
    assert_eq!(frames.len(), 3);
    for (f, s) in frames.iter().zip(&scenes) {
        assert_eq!(f.scene.cloud.len(), s.cloud.len());
        assert_eq!(f.scene.boxes.len(), s.boxes.len());
        for (a, b) in f.scene.boxes.iter().zip(&s.boxes) {
            // label files carry two decimals
            assert!(bev_iou(a, b) > 0.98, "{a:?} vs {b:?}");
            assert!((a.z - b.z).abs() < 0.01);
        }
    }
}

#[test]
fn saved_checkpoint_reproduces_detections() {
    let c = tiny_config();
    let data = synthetic_dataset(2, &c.model, 1);
    let mut t = Trainer::new(&c).unwrap();
    t.fit(&data, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.vxnc");
    t.checkpoint().save(&path).unwrap();
    let mut back = Trainer::resume(&c, &Checkpoint::load(&path).unwrap()).unwrap();
    let cloud = &make_synthetic_scene(&mut ChaCha8Rng::seed_from_u64(9), &c.model).cloud;
    let a = detect(&mut t.net, &t.anchors, cloud, &c.model, &c.eval, 0).unwrap();
    let b = detect(&mut back.net, &back.anchors, cloud, &c.model, &c.eval, 0).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn result_files_evaluate_against_labels() {
    let c = tiny_config();
    let scenes = synthetic_dataset(4, &c.model, 2);
    let dir = tempfile::tempdir().unwrap();
    let calib = Calibration::axes_only();
    let mut frames = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        write_frame(dir.path(), &format!("{i:06}"), s);
        let dets: Vec<_> = s
            .boxes
            .iter()
            .map(|b| voxelnet::eval::Detection { bbox: *b, score: 0.9, class: c.model.class })
            .collect();
        let path = dir.path().join(format!("r{i}.txt"));
        fs::write(&path, format_results(&dets, &calib)).unwrap();
        let gts = read_records(&dir.path().join("label_2").join(format!("{i:06}.txt"))).unwrap();
        frames.push(EvalFrame { gts, dets: read_records(&path).unwrap() });
    }
    let cfg = c.eval.eval_config(c.model.class);
    assert_eq!(average_precision(&frames, &cfg, &Difficulty::ALL).ap, 1.0);
}
