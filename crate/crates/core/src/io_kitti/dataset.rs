use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Files of one frame in a KITTI-layout directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameFiles {
    pub name: String,
    pub velodyne: PathBuf,
    pub label: Option<PathBuf>,
    pub calib: Option<PathBuf>,
}

/// Frames of `root/velodyne/*.bin` in name order, with `label_2/` and `calib/` files where present.
pub fn list_frames(root: &Path) -> Result<Vec<FrameFiles>> {
    let dir = root.join("velodyne");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if path.extension().is_some_and(|x| x == "bin") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    let existing = |p: PathBuf| p.is_file().then_some(p);
    Ok(names
        .into_iter()
        .map(|name| FrameFiles {
            velodyne: dir.join(format!("{name}.bin")),
            label: existing(root.join("label_2").join(format!("{name}.txt"))),
            calib: existing(root.join("calib").join(format!("{name}.txt"))),
            name,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_in_name_order_with_optional_files() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["velodyne", "label_2", "calib"] {
            fs::create_dir(dir.path().join(sub)).unwrap();
        }
        for name in ["000002", "000000", "000001"] {
            fs::write(dir.path().join("velodyne").join(format!("{name}.bin")), []).unwrap();
        }
        fs::write(dir.path().join("velodyne/readme.txt"), "x").unwrap();
        fs::write(dir.path().join("label_2/000001.txt"), "").unwrap();
        let frames = list_frames(dir.path()).unwrap();
        let names: Vec<&str> = frames.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["000000", "000001", "000002"]);
        assert!(frames[1].label.is_some() && frames[0].label.is_none() && frames[2].calib.is_none());
        assert!(matches!(list_frames(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
