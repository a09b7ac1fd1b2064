//! Mean-pooled voxelization.
//!
//! Points outside the half-open range are dropped. Each voxel keeps its
//! first `max_points_per_voxel` points in input order, and once
//! `max_voxels` voxels exist, points that would open a new voxel are
//! dropped. Output is sorted by linear index `(iz * ny + iy) * nx + ix`.
//! Cell indices are computed per point in parallel; accumulation is
//! sequential, so results do not depend on the thread count.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::VoxelConfig;
use crate::error::{Error, Result};
use crate::model::Point;

/// Relative tolerance for snapping a coordinate onto a voxel boundary.
const SNAP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VoxelSet {
    /// (ix, iy, iz) per voxel.
    pub coords: Vec<[u32; 3]>,
    /// Mean (x, y, z, intensity, dt) of the retained points.
    pub features: Vec<[f64; 5]>,
    pub counts: Vec<u32>,
    pub grid_dims: [usize; 3],
}

impl VoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn linear_index(&self, i: usize) -> u64 {
        let [nx, ny, _] = self.grid_dims;
        let [ix, iy, iz] = self.coords[i];
        linearize([ix as usize, iy as usize, iz as usize], nx, ny)
    }

    /// Write `<prefix>.coords.bin` (int32 triples), `<prefix>.features.bin`
    /// (float32 5-vectors) and `<prefix>.header.txt`. Returns the three paths.
    pub fn write(&self, prefix: &Path) -> Result<[PathBuf; 3]> {
        let with = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        let coords_path = with(".coords.bin");
        let features_path = with(".features.bin");
        let header_path = with(".header.txt");

        let mut coords = Vec::with_capacity(self.len() * 12);
        for c in &self.coords {
            for v in c {
                coords.extend_from_slice(&(*v as i32).to_le_bytes());
            }
        }
        let mut features = Vec::with_capacity(self.len() * 20);
        for f in &self.features {
            for v in f {
                features.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let [nx, ny, nz] = self.grid_dims;
        let header = format!("dims {nx} {ny} {nz} count {}\n", self.len());

        fs::write(&coords_path, coords).map_err(|e| Error::io(&coords_path, e))?;
        fs::write(&features_path, features).map_err(|e| Error::io(&features_path, e))?;
        fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))?;
        Ok([coords_path, features_path, header_path])
    }
}

pub(crate) fn linearize([ix, iy, iz]: [usize; 3], nx: usize, ny: usize) -> u64 {
    ((iz as u64 * ny as u64) + iy as u64) * nx as u64 + ix as u64
}

fn axis_index(v: f64, lo: f64, size: f64, n: usize) -> Option<usize> {
    let t = (v - lo) / size;
    if !t.is_finite() {
        return None;
    }
    let r = t.round();
    let cell = if (t - r).abs() <= SNAP_EPS * t.abs().max(1.0) {
        r
    } else {
        t.floor()
    };
    (cell >= 0.0 && cell < n as f64).then_some(cell as usize)
}

/// Voxel cell of a point, or `None` when it lies outside the range. A point
/// exactly on the upper boundary is outside.
pub fn voxel_coord(p: &Point, cfg: &VoxelConfig) -> Option<[usize; 3]> {
    let dims = cfg.grid_dims();
    let lo = cfg.range.min;
    let s = cfg.voxel_size;
    Some([
        axis_index(p.x, lo[0], s[0], dims[0])?,
        axis_index(p.y, lo[1], s[1], dims[1])?,
        axis_index(p.z, lo[2], s[2], dims[2])?,
    ])
}

struct Slot {
    linear: u64,
    coord: [usize; 3],
    sum: [f64; 5],
    count: u32,
}

pub fn voxelize(points: &[Point], cfg: &VoxelConfig) -> VoxelSet {
    let dims = cfg.grid_dims();
    let [nx, ny, _] = dims;
    let cells: Vec<Option<[usize; 3]>> = points.par_iter().map(|p| voxel_coord(p, cfg)).collect();

    let cap = cfg.max_points_per_voxel as u32;
    let mut lookup: HashMap<u64, usize> = HashMap::new();
    let mut slots: Vec<Slot> = Vec::new();
    for (p, cell) in points.iter().zip(cells) {
        let Some(coord) = cell else { continue };
        let linear = linearize(coord, nx, ny);
        let slot = match lookup.get(&linear) {
            Some(&i) => i,
            None => {
                if slots.len() >= cfg.max_voxels {
                    continue;
                }
                lookup.insert(linear, slots.len());
                slots.push(Slot {
                    linear,
                    coord,
                    sum: [0.0; 5],
                    count: 0,
                });
                slots.len() - 1
            }
        };
        let slot = &mut slots[slot];
        if slot.count < cap {
            for (acc, v) in slot.sum.iter_mut().zip(p.to_array()) {
                *acc += v;
            }
            slot.count += 1;
        }
    }

    slots.sort_unstable_by_key(|s| s.linear);
    let mut out = VoxelSet {
        coords: Vec::with_capacity(slots.len()),
        features: Vec::with_capacity(slots.len()),
        counts: Vec::with_capacity(slots.len()),
        grid_dims: dims,
    };
    for s in slots {
        let n = s.count as f64;
        out.coords.push(s.coord.map(|c| c as u32));
        out.features.push(s.sum.map(|v| v / n));
        out.counts.push(s.count);
    }
    out
}
