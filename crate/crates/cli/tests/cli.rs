use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use voxelnet::config::Config;
use voxelnet::io_kitti::{encode_pointcloud, Calibration, LabelRecord};
use voxelnet::nn::Checkpoint;
use voxelnet::trainer::synthetic_dataset;

fn voxelpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxelpipe")).args(args).env_remove("VOXELPIPE_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: [&str; 14] = [
    "--set", "vfe.layers=7:4,4:8",
    "--set", "vfe.out=8",
    "--set", "middle.channels=4",
    "--set", "rpn.channels=4,4,8",
    "--set", "rpn.up_channels=4,4,4",
    "--set", "train.epochs=2",
    "--set", "eval.score_threshold=0.0",
];

fn write_kitti(root: &Path, n: usize) {
    for d in ["velodyne", "label_2"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    let model = Config::from_profile("desk").unwrap().model;
    for (i, s) in synthetic_dataset(n, &model, 3).iter().enumerate() {
        fs::write(root.join(format!("velodyne/{i:06}.bin")), encode_pointcloud(&s.cloud)).unwrap();
        let lines: String = s
            .boxes
            .iter()
            .map(|b| {
                let mut r = LabelRecord::from_lidar_box(s.classes[0], b, &Calibration::axes_only(), None);
                r.bbox = [100.0, 100.0, 200.0, 200.0];
                r.to_line() + "\n"
            })
            .collect();
        fs::write(root.join(format!("label_2/{i:06}.txt")), lines).unwrap();
    }
}

#[test]
fn selfcheck_filter_runs_only_matching_suites() {
    let o = voxelpipe(&["selfcheck", "--filter", "vfe"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let suites: Vec<&str> = out.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert_eq!(suites.len(), 3, "{out}");
    assert!(suites.iter().all(|l| l.starts_with("PASS") && l.contains("vfe.")));
}

#[test]
fn corrupted_checkpoint_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.vxnc");
    let mut ck = Checkpoint::default();
    ck.push("w", &[4], vec![1.0, 2.0, 3.0, 4.0]);
    let mut bytes = ck.to_bytes();
    bytes.truncate(bytes.len() - 5);
    fs::write(&path, bytes).unwrap();
    let o = voxelpipe(&["selfcheck", "--filter", "eval", "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("FAIL") && l.contains("offset")), "{out}");
}

#[test]
fn exit_codes() {
    assert_eq!(voxelpipe(&["train", "--data", "synthetic:1", "--out", "/tmp/unused", "--set", "no.such=1"]).status.code(), Some(2));
    assert_eq!(voxelpipe(&["voxelize", "--cloud", "/nonexistent/cloud.bin"]).status.code(), Some(3));
    assert_eq!(voxelpipe(&["selfcheck", "--filter", "nothing-matches"]).status.code(), Some(2));
    assert_eq!(voxelpipe(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn voxelize_stats_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    write_kitti(dir.path(), 1);
    let cloud = dir.path().join("velodyne/000000.bin");
    let dump = dir.path().join("voxels.bin");
    let o = voxelpipe(&["voxelize", "--cloud", cloud.to_str().unwrap(), "--stats", "--dump", dump.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let k: u32 = out.lines().find_map(|l| l.strip_prefix("num_voxels ")).unwrap().parse().unwrap();
    let bytes = fs::read(&dump).unwrap();
    assert_eq!(&bytes[..4], b"VXLB");
    let header: Vec<u32> = bytes[4..24].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(header, [k, 35, 10, 80, 80]);
    assert_eq!(bytes.len(), 24 + 4 * (k as usize) * (35 * 7 + 3 + 1));
    let manifest: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&o.stderr)).unwrap();
    assert_eq!(manifest["command"], "voxelize");
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_override_changes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_kitti(dir.path(), 1);
    let cloud = dir.path().join("velodyne/000000.bin");
    let o = Command::new(env!("CARGO_BIN_EXE_voxelpipe"))
        .args(["voxelize", "--cloud", cloud.to_str().unwrap()])
        .env("VOXELPIPE_SEED", "77")
        .output()
        .unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&String::from_utf8_lossy(&o.stderr)).unwrap();
    assert_eq!(manifest["seed"], 77);
}

#[test]
fn train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("kitti");
    write_kitti(&data, 2);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend(TINY);
    let o = voxelpipe(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 3);
    assert!(run.join("manifest.json").is_file());

    let results = dir.path().join("results");
    let ply = dir.path().join("ply");
    let ck = run.join("model.vxnc");
    let mut args = vec![
        "infer",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        results.to_str().unwrap(),
        "--export-ply",
        ply.to_str().unwrap(),
    ];
    args.extend(TINY);
    let o = voxelpipe(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..2 {
        let lines = fs::read_to_string(results.join(format!("{i:06}.txt"))).unwrap();
        assert!(lines.lines().all(|l| l.split_whitespace().count() == 16), "{lines}");
        assert!(fs::read_to_string(ply.join(format!("{i:06}.ply"))).unwrap().starts_with("ply\n"));
    }

    let labels = data.join("label_2");
    let o = voxelpipe(&["eval", "--results", results.to_str().unwrap(), "--labels", labels.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for d in ["easy", "moderate", "hard"] {
        let ap: f64 = out.lines().find(|l| l.starts_with(d)).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&ap));
    }

    // labels evaluated as their own results score perfectly
    let o = voxelpipe(&["eval", "--results", labels.to_str().unwrap(), "--labels", labels.to_str().unwrap()]);
    let out = stdout(&o);
    assert!(out.lines().find(|l| l.starts_with("moderate")).unwrap().contains("1.0000"), "{out}");
}

fn buffer_build_ms(points: usize) -> f64 {
    let o = voxelpipe(&["bench", "--reps", "7", "--points", &points.to_string()]);
    assert!(o.status.success());
    let out = stdout(&o);
    out.lines().find(|l| l.starts_with("buffer_build")).unwrap().split_whitespace().nth(2).unwrap().parse().unwrap()
}

#[test]
fn bench_prints_four_stages() {
    let o = voxelpipe(&["bench", "--reps", "1", "--points", "5000"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(2).collect();
    let stages: Vec<&str> = rows.iter().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(stages, ["buffer_build", "vfe", "middle", "rpn"]);
}

#[test]
fn buffer_build_scales_linearly() {
    // best of three medians, so other tests running alongside do not skew the ratio
    let best = |n| (0..3).map(|_| buffer_build_ms(n)).fold(f64::INFINITY, f64::min);
    let (a, b) = (best(100_000), best(200_000));
    assert!(b <= 2.5 * a, "{a} ms -> {b} ms");
}
