//! KITTI point clouds, labels and calibration, plus range cropping.

mod calib;
mod dataset;
mod labels;

use std::fs;
use std::path::Path;

pub use calib::Calibration;
pub use dataset::{list_frames, FrameFiles};
pub use labels::{load_labels, parse_labels, LabelRecord, Labels, ObjectClass};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance in `[0, 1]`.
    pub r: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Point { x, y, z, r }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn set_xyz(&mut self, p: [f64; 3]) {
        self.x = p[0];
        self.y = p[1];
        self.z = p[2];
    }
}

/// Unordered set of LiDAR returns in the sensor frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    /// Records dropped because a field was NaN or infinite.
    pub rejected: usize,
    /// Records whose reflectance was clamped into `[0, 1]`.
    pub clamped: usize,
}

/// Decodes packed little-endian `f32 x4` records.
pub fn decode_pointcloud(bytes: &[u8], path: &Path) -> Result<(PointCloud, LoadReport)> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::TruncatedCloud { path: path.to_path_buf(), len: bytes.len() as u64 });
    }
    let mut report = LoadReport::default();
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]);
        let v = [f(0), f(4), f(8), f(12)];
        if v.iter().any(|x| !x.is_finite()) {
            report.rejected += 1;
            continue;
        }
        let mut r = v[3] as f64;
        if !(0.0..=1.0).contains(&r) {
            report.clamped += 1;
            r = r.clamp(0.0, 1.0);
        }
        points.push(Point::new(v[0] as f64, v[1] as f64, v[2] as f64, r));
    }
    if report.clamped > 0 {
        log::warn!("{}: clamped reflectance of {} points into [0, 1]", path.display(), report.clamped);
    }
    if report.rejected > 0 {
        log::warn!("{}: dropped {} non-finite records", path.display(), report.rejected);
    }
    Ok((PointCloud::new(points), report))
}

pub fn load_pointcloud(path: &Path) -> Result<(PointCloud, LoadReport)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_pointcloud(&bytes, path)
}

pub fn encode_pointcloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_pointcloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_pointcloud(cloud)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Axis-aligned crop region, `[low, high)` on every axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub z: (f64, f64),
    pub y: (f64, f64),
    pub x: (f64, f64),
}

impl Range {
    /// From `(z_min, z_max, y_min, y_max, x_min, x_max)`.
    pub fn from_zyx(v: [f64; 6]) -> Result<Self> {
        let r = Range { z: (v[0], v[1]), y: (v[2], v[3]), x: (v[4], v[5]) };
        for (lo, hi) in [r.z, r.y, r.x] {
            if !(lo < hi) {
                return Err(Error::Config(format!("range axis [{lo}, {hi}) is empty")));
            }
        }
        Ok(r)
    }

    pub fn to_zyx(&self) -> [f64; 6] {
        [self.z.0, self.z.1, self.y.0, self.y.1, self.x.0, self.x.1]
    }

    pub fn contains(&self, p: &Point) -> bool {
        (self.z.0..self.z.1).contains(&p.z) && (self.y.0..self.y.1).contains(&p.y) && (self.x.0..self.x.1).contains(&p.x)
    }

    /// Whether a box center lies inside the BEV footprint of the range.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        (self.x.0..self.x.1).contains(&x) && (self.y.0..self.y.1).contains(&y)
    }

    /// Extents `(D, H, W)` along Z, Y, X.
    pub fn extent(&self) -> [f64; 3] {
        [self.z.1 - self.z.0, self.y.1 - self.y.0, self.x.1 - self.x.0]
    }
}

pub fn crop_to_range(cloud: &PointCloud, range: &Range) -> PointCloud {
    PointCloud::new(cloud.points.iter().filter(|p| range.contains(p)).copied().collect())
}

/// Keeps points in front of the camera whose projection lands inside the image.
pub fn filter_by_image_frustum(cloud: &PointCloud, calib: &Calibration) -> Result<PointCloud> {
    calib.validate()?;
    let (w, h) = calib.image_size;
    let kept = cloud
        .points
        .iter()
        .filter(|p| {
            let rect = calib.velo_to_rect(p.xyz());
            if rect[2] <= 0.0 {
                return false;
            }
            match calib.project_rect(rect) {
                Some((u, v)) => (0.0..w as f64).contains(&u) && (0.0..h as f64).contains(&v),
                None => false,
            }
        })
        .copied()
        .collect();
    Ok(PointCloud::new(kept))
}
