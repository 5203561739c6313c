use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::Calibration;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn kitti_name(&self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kitti_name())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "car" => Ok(ObjectClass::Car),
            "pedestrian" => Ok(ObjectClass::Pedestrian),
            "cyclist" => Ok(ObjectClass::Cyclist),
            other => Err(Error::Config(format!("unknown class {other:?} (expected car, pedestrian or cyclist)"))),
        }
    }
}

/// One line of a KITTI `label_2` (15 fields) or result file (16 fields, with score).
///
/// Geometry is in the rectified camera frame: `location` is the bottom-face
/// center, `dims` is `(h, w, l)`, `rotation_y` is yaw about the camera Y axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class_name: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: [f64; 4],
    pub dims: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 15 && f.len() != 16 {
            return Err(format!("expected 15 or 16 fields, found {}", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {}: {e}", i + 1));
        Ok(LabelRecord {
            class_name: f[0].to_string(),
            truncated: num(1)?,
            occluded: num(2)? as i32,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dims: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if f.len() == 16 { Some(num(15)?) } else { None },
        })
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            self.class_name,
            self.truncated,
            self.occluded,
            self.alpha,
            self.bbox[0],
            self.bbox[1],
            self.bbox[2],
            self.bbox[3],
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y
        );
        if let Some(score) = self.score {
            s.push_str(&format!(" {score:.4}"));
        }
        s
    }

    pub fn class(&self) -> Option<ObjectClass> {
        self.class_name.parse().ok()
    }

    pub fn is_dont_care(&self) -> bool {
        self.class_name == "DontCare"
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    /// The box in the LiDAR frame; the bottom-face center is lifted by `h/2`.
    pub fn to_lidar_box(&self, calib: &Calibration) -> Result<Box3D> {
        let [h, w, l] = self.dims;
        let bottom = calib.rect_to_velo(self.location)?;
        Ok(Box3D::new(bottom[0], bottom[1], bottom[2] + h / 2.0, l, w, h, normalize_angle(-self.rotation_y - FRAC_PI_2)))
    }

    /// Rigid re-expression of the camera-frame box with LiDAR axis conventions.
    ///
    /// Needs no calibration, and overlaps are preserved, so evaluation can
    /// compare result and label files directly.
    pub fn eval_box(&self) -> Box3D {
        let [h, w, l] = self.dims;
        let [x, y, z] = self.location;
        Box3D::new(z, -x, -y + h / 2.0, l, w, h, normalize_angle(-self.rotation_y - FRAC_PI_2))
    }

    /// Camera-frame record for a LiDAR box; the 2D box is the clipped projection of its corners.
    pub fn from_lidar_box(class: ObjectClass, b: &Box3D, calib: &Calibration, score: Option<f64>) -> Self {
        let bottom = calib.velo_to_rect([b.x, b.y, b.z - b.h / 2.0]);
        let rotation_y = normalize_angle(-b.theta - FRAC_PI_2);
        let alpha = normalize_angle(rotation_y - bottom[0].atan2(bottom[2]));
        LabelRecord {
            class_name: class.kitti_name().to_string(),
            truncated: if score.is_some() { -1.0 } else { 0.0 },
            occluded: if score.is_some() { -1 } else { 0 },
            alpha,
            bbox: project_bbox(b, calib),
            dims: [b.h, b.w, b.l],
            location: bottom,
            rotation_y,
            score,
        }
    }
}

/// Image-plane bounding box of the projected corners, clipped to the image.
pub fn project_bbox(b: &Box3D, calib: &Calibration) -> [f64; 4] {
    let (w, h) = (calib.image_size.0 as f64, calib.image_size.1 as f64);
    let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in b.corners_3d() {
        if let Some((u, v)) = calib.project_rect(calib.velo_to_rect(c)) {
            bbox[0] = bbox[0].min(u);
            bbox[1] = bbox[1].min(v);
            bbox[2] = bbox[2].max(u);
            bbox[3] = bbox[3].max(v);
        }
    }
    if !bbox[0].is_finite() {
        return [0.0; 4];
    }
    [bbox[0].clamp(0.0, w - 1.0), bbox[1].clamp(0.0, h - 1.0), bbox[2].clamp(0.0, w - 1.0), bbox[3].clamp(0.0, h - 1.0)]
}

#[derive(Debug, Clone, Default)]
pub struct Labels {
    /// Ground-truth boxes of Car/Pedestrian/Cyclist in the LiDAR frame.
    pub boxes: Vec<Box3D>,
    pub classes: Vec<ObjectClass>,
    /// Source records aligned with `boxes`.
    pub records: Vec<LabelRecord>,
    pub dont_care: Vec<LabelRecord>,
    /// Lines with any other class.
    pub dropped: usize,
}

impl Labels {
    pub fn of_class(&self, class: ObjectClass) -> Vec<Box3D> {
        self.boxes.iter().zip(&self.classes).filter(|(_, &c)| c == class).map(|(b, _)| *b).collect()
    }
}

pub fn parse_labels(text: &str, path: &Path, calib: &Calibration) -> Result<Labels> {
    let mut out = Labels::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = LabelRecord::parse(line).map_err(|msg| Error::Parse { path: path.to_path_buf(), line: i + 1, msg })?;
        if rec.is_dont_care() {
            out.dont_care.push(rec);
            continue;
        }
        match rec.class() {
            Some(class) => {
                out.boxes.push(rec.to_lidar_box(calib)?);
                out.classes.push(class);
                out.records.push(rec);
            }
            None => out.dropped += 1,
        }
    }
    if out.dropped > 0 {
        log::debug!("{}: dropped {} labels of other classes", path.display(), out.dropped);
    }
    Ok(out)
}

pub fn load_labels(path: &Path, calib: &Calibration) -> Result<Labels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_labels(&text, path, calib)
}
