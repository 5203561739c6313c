use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use voxelnet::config::{Config, ModelConfig};
use voxelnet::detector::{reshape_to_bev, FrameInput, VoxelNet};
use voxelnet::eval::{average_precision, format_results, read_records, write_ply, Difficulty, EvalFrame, IouMode};
use voxelnet::io_kitti::{filter_by_image_frustum, list_frames, load_pointcloud, Calibration, ObjectClass, PointCloud};
use voxelnet::nn::{Checkpoint, Mode, SparseVolume, Tensor};
use voxelnet::trainer::{detect, load_kitti_dir, make_synthetic_scene, synthetic_dataset, voxelize, Trainer};
use voxelnet::{selfcheck, Error};

#[derive(Parser)]
#[command(name = "voxelpipe", version, about = "Voxel-based 3D object detection on LiDAR point clouds")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given.
    #[arg(long)]
    class: Option<ObjectClass>,
    /// Keep only points that project into the camera image.
    #[arg(long)]
    frustum_filter: bool,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a point cloud into voxel buffers.
    Voxelize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Print voxel and overflow counts.
        #[arg(long)]
        stats: bool,
        /// Write the buffers as a flat binary file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train on a KITTI directory or `synthetic:N` scenes.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint on clouds and write KITTI result files.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// KITTI directory with a `velodyne/` folder.
        #[arg(long, conflicts_with = "cloud")]
        data: Option<PathBuf>,
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write one colored PLY per frame into this directory.
        #[arg(long)]
        export_ply: Option<PathBuf>,
    },
    /// Average precision of result files against KITTI labels.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Run the built-in invariant suites.
    Selfcheck {
        /// Only suites whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Also verify that this checkpoint file loads.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the four pipeline stages.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        cloud: Option<PathBuf>,
        /// Points in the generated cloud when no `--cloud` is given.
        #[arg(long, default_value_t = 20000)]
        points: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

/// Errors that map to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

/// Errors that map to exit code 1 without a message of their own.
#[derive(Debug, thiserror::Error)]
#[error("{0} check(s) failed")]
struct ChecksFailed(usize);

struct Manifest {
    command: &'static str,
    config: Option<Config>,
    hasher: Sha256,
    timings: Vec<(String, f64)>,
}

impl Manifest {
    fn new(command: &'static str, config: Option<&Config>) -> Self {
        let mut hasher = Sha256::new();
        if let Some(c) = config {
            hasher.update(c.snapshot().as_bytes());
        }
        Manifest { command, config: config.cloned(), hasher, timings: Vec::new() }
    }

    /// Hashes an input the way git hashes a blob.
    fn input(&mut self, bytes: &[u8]) {
        self.hasher.update(format!("blob {}\0", bytes.len()).as_bytes());
        self.hasher.update(bytes);
    }

    fn input_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        self.input(&bytes);
        Ok(())
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.timings.push((stage.to_string(), t0.elapsed().as_secs_f64()));
        out
    }

    fn emit(self, out: Option<&Path>) -> anyhow::Result<()> {
        let hash: String = self.hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let timings: serde_json::Map<String, serde_json::Value> =
            self.timings.into_iter().map(|(k, v)| (k, json!(v))).collect();
        let doc = json!({
            "command": self.command,
            "config": self.config.as_ref().map(|c| c.snapshot()),
            "seed": self.config.as_ref().map(|c| c.seed),
            "input_hash": hash,
            "timings_s": timings,
        });
        let text = serde_json::to_string_pretty(&doc)?;
        eprintln!("{text}");
        if let Some(dir) = out {
            write_file(&dir.join("manifest.json"), text.as_bytes())?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    Ok(())
}

fn build_config(args: &ConfigArgs) -> anyhow::Result<Config> {
    let mut cfg = match (&args.config, args.class) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(class)) => Config::from_profile(&class.kitti_name().to_lowercase())?,
        (None, None) => Config::from_profile("desk")?,
    };
    if let (Some(_), Some(class)) = (&args.config, args.class) {
        cfg.model.class = class;
    }
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if args.frustum_filter {
        cfg.model.frustum = true;
    }
    if let Ok(seed) = std::env::var("VOXELPIPE_SEED") {
        cfg.set("seed", &seed)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_cloud(path: &Path, calib: Option<&Calibration>, model: &ModelConfig) -> anyhow::Result<PointCloud> {
    let (mut cloud, report) = load_pointcloud(path)?;
    if report.rejected > 0 {
        log::warn!("{}: {} non-finite points dropped", path.display(), report.rejected);
    }
    if report.clamped > 0 {
        log::warn!("{}: {} reflectance values clamped", path.display(), report.clamped);
    }
    if model.frustum {
        let calib = calib.ok_or_else(|| Usage("--frustum-filter needs --calib".into()))?;
        cloud = filter_by_image_frustum(&cloud, calib)?;
    }
    Ok(cloud)
}

fn run_voxelize(cfg: Config, cloud: &Path, calib: Option<&Path>, stats: bool, dump: Option<&Path>) -> anyhow::Result<()> {
    let mut m = Manifest::new("voxelize", Some(&cfg));
    m.input_file(cloud)?;
    let calib = calib.map(Calibration::load).transpose()?;
    let points = m.time("load", || load_cloud(cloud, calib.as_ref(), &cfg.model))?;
    let buf = m.time("buffer_build", || voxelize(&points, &cfg.model, cfg.seed))?;
    if stats {
        let s = &buf.stats;
        println!("num_voxels {}", buf.num_voxels());
        println!("occupied_voxels {}", s.occupied_voxels);
        println!("points_in {}", s.points_in);
        println!("points_kept {}", s.points_kept);
        println!("out_of_range {}", s.out_of_range);
        println!("dropped_full_voxel {}", s.dropped_full_voxel);
        println!("dropped_voxel_limit {}", s.dropped_voxel_limit);
    }
    if let Some(path) = dump {
        write_file(path, &buf.to_bytes())?;
    }
    m.emit(None)
}

fn run_train(cfg: Config, data: &str, out: &Path) -> anyhow::Result<()> {
    create_dir(out)?;
    let mut m = Manifest::new("train", Some(&cfg));
    let scenes = if let Some(n) = data.strip_prefix("synthetic:") {
        let n: usize = n.parse().map_err(|_| Usage(format!("bad scene count in `{data}`")))?;
        m.input(data.as_bytes());
        synthetic_dataset(n, &cfg.model, cfg.seed)
    } else {
        for f in list_frames(Path::new(data))? {
            for p in [Some(&f.velodyne), f.label.as_ref(), f.calib.as_ref()].into_iter().flatten() {
                m.input_file(p)?;
            }
        }
        load_kitti_dir(Path::new(data), &cfg.model, true)?.into_iter().map(|f| f.scene).collect()
    };
    if scenes.is_empty() {
        bail!(Usage(format!("no training frames in `{data}`")));
    }
    let mut trainer = Trainer::new(&cfg)?;
    m.time("train", || trainer.fit(&scenes, Some(out)))?;
    if let Some(last) = trainer.history.last() {
        log::info!("step {} loss {:.6}", last.step, last.loss.total);
    }
    m.emit(Some(out))
}

#[allow(clippy::too_many_arguments)]
fn run_infer(
    cfg: Config,
    checkpoint: &Path,
    data: Option<&Path>,
    cloud: Option<&Path>,
    calib: Option<&Path>,
    out: &Path,
    ply: Option<&Path>,
) -> anyhow::Result<()> {
    create_dir(out)?;
    if let Some(dir) = ply {
        create_dir(dir)?;
    }
    let mut m = Manifest::new("infer", Some(&cfg));
    m.input_file(checkpoint)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut trainer = Trainer::resume(&cfg, &ck)?;
    let frames: Vec<(String, PointCloud, Vec<voxelnet::geometry::Box3D>, Calibration)> = match (data, cloud) {
        (Some(dir), _) => load_kitti_dir(dir, &cfg.model, false)?
            .into_iter()
            .map(|f| (f.name, f.scene.cloud, f.scene.boxes, f.calib))
            .collect(),
        (None, Some(path)) => {
            m.input_file(path)?;
            let c = calib.map(Calibration::load).transpose()?;
            let points = load_cloud(path, c.as_ref(), &cfg.model)?;
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "frame".into());
            vec![(name, points, Vec::new(), c.unwrap_or_else(Calibration::axes_only))]
        }
        (None, None) => bail!(Usage("infer needs --data or --cloud".into())),
    };
    let t0 = Instant::now();
    for (name, points, gts, calib) in &frames {
        let dets = detect(&mut trainer.net, &trainer.anchors, points, &cfg.model, &cfg.eval, cfg.seed)?;
        let text = format_results(&dets, calib);
        write_file(&out.join(format!("{name}.txt")), text.as_bytes())?;
        if let Some(dir) = ply {
            write_ply(&dir.join(format!("{name}.ply")), points, gts, &dets)?;
        }
        println!("{name} {} detections", dets.len());
    }
    m.timings.push(("detect".into(), t0.elapsed().as_secs_f64()));
    m.emit(Some(out))
}

fn run_eval(cfg: Config, results: &Path, labels: &Path) -> anyhow::Result<()> {
    let mut m = Manifest::new("eval", Some(&cfg));
    let mut names: Vec<String> = fs::read_dir(labels)
        .map_err(|e| Error::io(format!("listing {}", labels.display()), e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().is_some_and(|x| x == "txt")).then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    let mut frames = Vec::with_capacity(names.len());
    for name in &names {
        let gt_path = labels.join(format!("{name}.txt"));
        let det_path = results.join(format!("{name}.txt"));
        m.input_file(&gt_path)?;
        let dets = if det_path.exists() {
            m.input_file(&det_path)?;
            read_records(&det_path)?
        } else {
            Vec::new()
        };
        frames.push(EvalFrame { gts: read_records(&gt_path)?, dets });
    }
    let class = cfg.model.class;
    let ec = cfg.eval.eval_config(class);
    let mode = match ec.mode {
        IouMode::Bev => "bev",
        IouMode::ThreeD => "3d",
    };
    println!("class {} mode {mode} iou {} frames {}", class.kitti_name(), ec.iou_threshold, frames.len());
    println!("{:<10} {:>8} {:>6} {:>6}", "difficulty", "AP", "gt", "det");
    m.time("evaluate", || {
        for d in [Difficulty::EASY, Difficulty::MODERATE, Difficulty::HARD] {
            let r = average_precision(&frames, &ec, &d);
            println!("{:<10} {:>8.4} {:>6} {:>6}", d.name, r.ap, r.num_gt, r.num_det);
        }
    });
    m.emit(None)
}

fn run_selfcheck(filter: Option<&str>, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let mut m = Manifest::new("selfcheck", None);
    let mut reports = m.time("suites", || selfcheck::run(filter));
    if let Some(path) = checkpoint {
        reports.push(selfcheck::check_checkpoint_file(path));
    }
    if reports.is_empty() {
        bail!(Usage(format!("no suite matches `{}`", filter.unwrap_or(""))));
    }
    for r in &reports {
        println!("{} {:<32} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", reports.len() - failed);
    m.emit(None)?;
    if failed > 0 {
        bail!(ChecksFailed(failed));
    }
    Ok(())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn run_bench(cfg: Config, cloud: Option<&Path>, points: usize, reps: usize) -> anyhow::Result<()> {
    if reps == 0 {
        bail!(Usage("--reps must be at least 1".into()));
    }
    let mut m = Manifest::new("bench", Some(&cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = match cloud {
        Some(path) => {
            m.input_file(path)?;
            load_cloud(path, None, &cfg.model)?
        }
        None => {
            let mut c = make_synthetic_scene(&mut rng, &cfg.model).cloud;
            // pad or trim to the requested size with points spread over the range
            let r = cfg.model.voxel.range;
            while c.points.len() < points {
                use rand::Rng;
                c.points.push(voxelnet::io_kitti::Point::new(
                    rng.random_range(r.x.0..r.x.1),
                    rng.random_range(r.y.0..r.y.1),
                    rng.random_range(r.z.0..r.z.1),
                    rng.random_range(0.0..1.0),
                ));
            }
            c.points.truncate(points);
            c
        }
    };
    let mut net: VoxelNet<f32> = VoxelNet::new(&cfg.model.network, cfg.model.grid_dims()?, &mut rng)?;
    let stages = ["buffer_build", "vfe", "middle", "rpn"];
    let mut times = vec![Vec::with_capacity(reps); 4];
    for _ in 0..reps {
        let t = Instant::now();
        let buf = voxelize(&input, &cfg.model, cfg.seed)?;
        times[0].push(t.elapsed().as_secs_f64());
        let frame: FrameInput<f32> = FrameInput::from_buffers(&buf);
        let t = Instant::now();
        let (vf, _) = net.features.forward(frame.features, &frame.counts, Mode::Eval)?;
        times[1].push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let vol = SparseVolume { features: vf, coords: frame.coords, grid: net.grid };
        let (mid, _) = net.middle.forward_sparse(vec![vol], Mode::Eval)?;
        times[2].push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let depth = mid.dim(2);
        let bev: Tensor<f32> = reshape_to_bev(mid, depth)?;
        let _ = net.rpn.forward(bev, Mode::Eval)?;
        times[3].push(t.elapsed().as_secs_f64());
    }
    println!("points {} reps {reps}", input.len());
    println!("{:<14} {:>10} {:>10} {:>10}", "stage", "mean_ms", "p50_ms", "p95_ms");
    for (name, mut t) in stages.iter().zip(times) {
        t.sort_by(f64::total_cmp);
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        println!("{name:<14} {:>10.3} {:>10.3} {:>10.3}", mean * 1e3, percentile(&t, 0.5) * 1e3, percentile(&t, 0.95) * 1e3);
        m.timings.push((format!("{name}_mean"), mean));
    }
    m.emit(None)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Voxelize { cfg, cloud, calib, stats, dump } => {
            run_voxelize(build_config(&cfg)?, &cloud, calib.as_deref(), stats, dump.as_deref())
        }
        Command::Train { cfg, data, out } => run_train(build_config(&cfg)?, &data, &out),
        Command::Infer { cfg, checkpoint, data, cloud, calib, out, export_ply } => run_infer(
            build_config(&cfg)?,
            &checkpoint,
            data.as_deref(),
            cloud.as_deref(),
            calib.as_deref(),
            &out,
            export_ply.as_deref(),
        ),
        Command::Eval { cfg, results, labels } => run_eval(build_config(&cfg)?, &results, &labels),
        Command::Selfcheck { filter, checkpoint } => run_selfcheck(filter.as_deref(), checkpoint.as_deref()),
        Command::Bench { cfg, cloud, points, reps } => run_bench(build_config(&cfg)?, cloud.as_deref(), points, reps),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<Usage>() {
        return 2;
    }
    if err.is::<ChecksFailed>() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parse { .. } | Error::Calibration(_)) => 2,
        Some(Error::Io { .. } | Error::TruncatedCloud { .. } | Error::Checkpoint { .. }) => 3,
        Some(_) => 1,
        None if err.is::<std::io::Error>() => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli).context("voxelpipe") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.is::<ChecksFailed>() {
                eprintln!("error: {:#}", e.root_cause());
            }
            let _ = std::io::stderr().flush();
            ExitCode::from(exit_code(&e))
        }
    }
}
