//! Voxel partition and the single-pass hash construction of the dense
//! `K x T x 7` feature buffer and `K x 3` coordinate buffer.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io_kitti::{Point, PointCloud, Range};
use crate::nn::{Scalar, Tensor};

/// Slots per buffered point: `(x, y, z, r)` then the centroid offsets.
pub const FEATURE_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelConfig {
    pub range: Range,
    /// `(v_D, v_H, v_W)` along Z, Y, X in meters.
    pub voxel_size: [f64; 3],
    /// T
    pub max_points: usize,
    /// K
    pub max_voxels: usize,
    pub seed: u64,
}

impl VoxelConfig {
    pub fn grid_dims(&self) -> Result<[usize; 3]> {
        grid_dims(self)
    }
}

/// `(D', H', W')`; each extent must be an integer multiple of its voxel size.
pub fn grid_dims(cfg: &VoxelConfig) -> Result<[usize; 3]> {
    if cfg.max_points == 0 || cfg.max_voxels == 0 {
        return Err(Error::Config("max_points and max_voxels must be at least 1".into()));
    }
    let extent = cfg.range.extent();
    let mut dims = [0usize; 3];
    for axis in 0..3 {
        let v = cfg.voxel_size[axis];
        if !(v > 0.0) || !(extent[axis] > 0.0) {
            return Err(Error::Config(format!("axis {axis}: extent {} and voxel size {v} must be positive", extent[axis])));
        }
        let ratio = extent[axis] / v;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-6 * n.max(1.0) || n < 1.0 {
            return Err(Error::Config(format!("axis {axis}: extent {} is not a multiple of voxel size {v}", extent[axis])));
        }
        dims[axis] = n as usize;
    }
    Ok(dims)
}

/// `(d, h, w)` of the voxel holding `p`. The point must lie inside the range.
pub fn voxel_index(p: &Point, cfg: &VoxelConfig, dims: [usize; 3]) -> [usize; 3] {
    let r = &cfg.range;
    let cell = |v: f64, lo: f64, size: f64, n: usize| {
        // the epsilon absorbs decimal voxel sizes such as 0.2 being inexact in binary
        let t = ((v - lo) / size + 1e-9).floor();
        (t.max(0.0) as usize).min(n - 1)
    };
    [
        cell(p.z, r.z.0, cfg.voxel_size[0], dims[0]),
        cell(p.y, r.y.0, cfg.voxel_size[1], dims[1]),
        cell(p.x, r.x.0, cfg.voxel_size[2], dims[2]),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VoxelStats {
    pub points_in: usize,
    pub points_kept: usize,
    /// Points ignored because their voxel already held T points.
    pub dropped_full_voxel: usize,
    /// Points ignored because their voxel was new and K voxels were allocated.
    pub dropped_voxel_limit: usize,
    pub out_of_range: usize,
    pub occupied_voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBuffers {
    /// `num_voxels x T x 7`, row-major.
    pub features: Vec<f64>,
    pub coords: Vec<[usize; 3]>,
    pub counts: Vec<usize>,
    /// Source point index of every filled row, `usize::MAX` for padding.
    pub sources: Vec<usize>,
    pub max_points: usize,
    pub grid: [usize; 3],
    pub stats: VoxelStats,
}

impl VoxelBuffers {
    pub fn num_voxels(&self) -> usize {
        self.coords.len()
    }

    pub fn row(&self, voxel: usize, slot: usize) -> &[f64] {
        let at = (voxel * self.max_points + slot) * FEATURE_DIM;
        &self.features[at..at + FEATURE_DIM]
    }

    pub fn feature_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.features.iter().map(|&v| S::from_f64_lossy(v)).collect();
        Tensor::from_vec(&[self.num_voxels(), self.max_points, FEATURE_DIM], data).expect("buffer length is consistent")
    }

    /// Flat little-endian dump: magic, `K T D H W` as u32, f32 features, u32 coords, u32 counts.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"VXLB".to_vec();
        for v in [self.num_voxels(), self.max_points, self.grid[0], self.grid[1], self.grid[2]] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &f in &self.features {
            out.extend_from_slice(&(f as f32).to_le_bytes());
        }
        for c in &self.coords {
            for &v in c {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        for &n in &self.counts {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out
    }
}

/// The permutation applied to the cloud before bucketing.
pub fn point_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub fn build_buffers(cloud: &PointCloud, cfg: &VoxelConfig) -> Result<VoxelBuffers> {
    build_buffers_in_order(cloud, cfg, &point_order(cloud.len(), cfg.seed))
}

/// One pass over `order`: voxels are allocated in first-seen order, each keeps
/// its first T points, and new voxels beyond K are ignored.
pub fn build_buffers_in_order(cloud: &PointCloud, cfg: &VoxelConfig, order: &[usize]) -> Result<VoxelBuffers> {
    let grid = grid_dims(cfg)?;
    let t = cfg.max_points;
    let mut slot_of: HashMap<usize, usize> = HashMap::new();
    let mut seen_dropped: HashSet<usize> = HashSet::new();
    let mut buf = VoxelBuffers {
        features: Vec::new(),
        coords: Vec::new(),
        counts: Vec::new(),
        sources: Vec::new(),
        max_points: t,
        grid,
        stats: VoxelStats { points_in: order.len(), ..Default::default() },
    };
    for &i in order {
        let p = &cloud.points[i];
        if !cfg.range.contains(p) {
            buf.stats.out_of_range += 1;
            continue;
        }
        let c = voxel_index(p, cfg, grid);
        let key = (c[0] * grid[1] + c[1]) * grid[2] + c[2];
        let slot = match slot_of.get(&key) {
            Some(&s) => s,
            None if buf.coords.len() < cfg.max_voxels => {
                let s = buf.coords.len();
                slot_of.insert(key, s);
                buf.coords.push(c);
                buf.counts.push(0);
                buf.features.resize((s + 1) * t * FEATURE_DIM, 0.0);
                buf.sources.resize((s + 1) * t, usize::MAX);
                s
            }
            None => {
                seen_dropped.insert(key);
                buf.stats.dropped_voxel_limit += 1;
                continue;
            }
        };
        let n = buf.counts[slot];
        if n == t {
            buf.stats.dropped_full_voxel += 1;
            continue;
        }
        let at = (slot * t + n) * FEATURE_DIM;
        buf.features[at..at + 4].copy_from_slice(&[p.x, p.y, p.z, p.r]);
        buf.sources[slot * t + n] = i;
        buf.counts[slot] = n + 1;
        buf.stats.points_kept += 1;
    }
    buf.stats.occupied_voxels = slot_of.len() + seen_dropped.len();
    Ok(buf)
}

/// Fills slots 4..7 of every occupied row with the offset from the voxel centroid.
pub fn augment_with_centroid(buf: &mut VoxelBuffers) {
    let t = buf.max_points;
    let counts = &buf.counts;
    buf.features.par_chunks_mut(t * FEATURE_DIM).zip(counts.par_iter()).for_each(|(block, &n)| {
        if n == 0 {
            return;
        }
        let mut mean = [0.0f64; 3];
        for row in block.chunks(FEATURE_DIM).take(n) {
            for a in 0..3 {
                mean[a] += row[a];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for row in block.chunks_mut(FEATURE_DIM).take(n) {
            for a in 0..3 {
                row[4 + a] = row[a] - mean[a];
            }
        }
    });
}

/// Scatters `[K, C]` voxel features into a dense `[C, D, H, W]` volume.
pub fn scatter_to_dense<S: Scalar>(features: &Tensor<S>, coords: &[[usize; 3]], grid: [usize; 3]) -> Result<Tensor<S>> {
    let c = channels_of(features, coords.len())?;
    let plane = grid[0] * grid[1] * grid[2];
    let mut out = Tensor::zeros(&[c, grid[0], grid[1], grid[2]]);
    let mut taken = vec![false; plane];
    for (k, &pos) in coords.iter().enumerate() {
        let at = flat_index(pos, grid)?;
        if std::mem::replace(&mut taken[at], true) {
            return Err(Error::Invariant(format!("duplicate voxel coordinate {pos:?}")));
        }
        for ch in 0..c {
            out.data_mut()[ch * plane + at] = features.data()[k * c + ch];
        }
    }
    Ok(out)
}

/// Reads `[K, C]` back out of a `[C, D, H, W]` volume; the adjoint of [`scatter_to_dense`].
pub fn gather_from_dense<S: Scalar>(dense: &Tensor<S>, coords: &[[usize; 3]]) -> Result<Tensor<S>> {
    let &[c, d, h, w] = dense.shape() else {
        return Err(Error::Shape(format!("gather expects [C, D, H, W], got {:?}", dense.shape())));
    };
    let grid = [d, h, w];
    let plane = d * h * w;
    let mut out = Tensor::zeros(&[coords.len(), c]);
    for (k, &pos) in coords.iter().enumerate() {
        let at = flat_index(pos, grid)?;
        for ch in 0..c {
            out.data_mut()[k * c + ch] = dense.data()[ch * plane + at];
        }
    }
    Ok(out)
}

fn channels_of<S: Scalar>(features: &Tensor<S>, k: usize) -> Result<usize> {
    match features.shape() {
        &[rows, c] if rows == k => Ok(c),
        s => Err(Error::Shape(format!("expected [{k}, C] voxel features, got {s:?}"))),
    }
}

fn flat_index(pos: [usize; 3], grid: [usize; 3]) -> Result<usize> {
    if pos.iter().zip(&grid).any(|(p, g)| p >= g) {
        return Err(Error::Invariant(format!("voxel coordinate {pos:?} outside grid {grid:?}")));
    }
    Ok((pos[0] * grid[1] + pos[1]) * grid[2] + pos[2])
}
