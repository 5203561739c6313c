use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use crate::error::{Error, Result};

/// KITTI camera/LiDAR calibration (LiDAR -> reference camera -> rectified camera -> image).
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub velo_to_cam: Matrix3x4<f64>,
    pub rect: Matrix3<f64>,
    pub proj: Matrix3x4<f64>,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
}

pub const KITTI_IMAGE_SIZE: (u32, u32) = (1242, 375);

/// LiDAR axes expressed in the camera frame: x_cam = -y, y_cam = -z, z_cam = x.
fn axes() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
}

impl Calibration {
    /// Pinhole `[I | 0]` everywhere: pixels are `(x/z, y/z)` of the input point.
    pub fn identity(image_size: (u32, u32)) -> Self {
        Calibration {
            velo_to_cam: Matrix3x4::identity(),
            rect: Matrix3::identity(),
            proj: Matrix3x4::identity(),
            image_size,
        }
    }

    /// Pure axis permutation between LiDAR and camera conventions, no offset.
    pub fn axes_only() -> Self {
        let mut velo_to_cam = Matrix3x4::zeros();
        velo_to_cam.fixed_view_mut::<3, 3>(0, 0).copy_from(&axes());
        Calibration { velo_to_cam, ..Calibration::canonical() }
    }

    /// A typical KITTI setup, used when a frame ships without calibration.
    pub fn canonical() -> Self {
        let mut velo_to_cam = Matrix3x4::zeros();
        velo_to_cam.fixed_view_mut::<3, 3>(0, 0).copy_from(&axes());
        velo_to_cam[(1, 3)] = -0.08;
        velo_to_cam[(2, 3)] = -0.27;
        #[rustfmt::skip]
        let proj = Matrix3x4::new(
            721.5377, 0.0, 609.5593, 44.85728,
            0.0, 721.5377, 172.854, 0.2163791,
            0.0, 0.0, 1.0, 0.002745884,
        );
        Calibration { velo_to_cam, rect: Matrix3::identity(), proj, image_size: KITTI_IMAGE_SIZE }
    }

    pub fn parse(text: &str, path: &Path, image_size: (u32, u32)) -> Result<Self> {
        let mut fields: HashMap<&str, (usize, Vec<f64>)> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let Some((key, rest)) = line.split_once(':') else { continue };
            let vals: std::result::Result<Vec<f64>, _> = rest.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: format!("{key}: {e}") })?;
            fields.insert(key.trim(), (i + 1, vals));
        }
        let get = |key: &str, n: usize| -> Result<Vec<f64>> {
            match fields.get(key) {
                Some((_, v)) if v.len() == n => Ok(v.clone()),
                Some((line, v)) => Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    msg: format!("{key} has {} values, expected {n}", v.len()),
                }),
                None => Err(Error::Calibration(format!("{}: missing {key}", path.display()))),
            }
        };
        let rect_key = if fields.contains_key("R0_rect") { "R0_rect" } else { "R_rect" };
        let velo_key = if fields.contains_key("Tr_velo_to_cam") { "Tr_velo_to_cam" } else { "Tr_velo_cam" };
        let calib = Calibration {
            proj: Matrix3x4::from_row_slice(&get("P2", 12)?),
            rect: Matrix3::from_row_slice(&get(rect_key, 9)?),
            velo_to_cam: Matrix3x4::from_row_slice(&get(velo_key, 12)?),
            image_size,
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path, KITTI_IMAGE_SIZE)
    }

    pub fn validate(&self) -> Result<()> {
        let det = self.rect.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Calibration(format!("rectification matrix is singular (det {det})")));
        }
        let r = self.velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        if r.determinant().abs() < 1e-12 {
            return Err(Error::Calibration("LiDAR-to-camera rotation is singular".into()));
        }
        Ok(())
    }

    pub fn velo_to_rect(&self, p: [f64; 3]) -> [f64; 3] {
        let cam = self.velo_to_cam * Vector4::new(p[0], p[1], p[2], 1.0);
        let r = self.rect * cam;
        [r[0], r[1], r[2]]
    }

    pub fn rect_to_velo(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let rinv = self.rect.try_inverse().ok_or_else(|| Error::Calibration("rectification matrix is singular".into()))?;
        let cam = rinv * Vector3::new(p[0], p[1], p[2]);
        let rot = self.velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let t = self.velo_to_cam.column(3).into_owned();
        let rot_inv = rot.try_inverse().ok_or_else(|| Error::Calibration("LiDAR-to-camera rotation is singular".into()))?;
        let v = rot_inv * (cam - t);
        Ok([v[0], v[1], v[2]])
    }

    /// Pixel of a rectified-camera point, `None` when not in front of the camera.
    pub fn project_rect(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let q = self.proj * Vector4::new(p[0], p[1], p[2], 1.0);
        if q[2] <= 0.0 || !q[2].is_finite() {
            return None;
        }
        Some((q[0] / q[2], q[1] / q[2]))
    }
}
