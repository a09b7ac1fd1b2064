//! Contiguous-array entry points for foreign-language bindings. Inputs are
//! borrowed row-major buffers; outputs are freshly allocated.

use crate::anchors::{assign_all, AnchorSet, AnchorTarget, GroupSpec, CODE_SIZE};
use crate::config::VoxelConfig;
use crate::dataset::DatasetIndex;
use crate::decode::{decode_and_suppress, GroupOutput, NmsConfig};
use crate::error::{Error, Result};
use crate::model::{Box3D, ClassId, NUM_CLASSES};
use crate::sampler::build_epoch;
use crate::voxel::voxelize;
use crate::model::Point;

/// Floats per input point: x, y, z, intensity, dt.
pub const POINT_WIDTH: usize = 5;
/// Floats per box row: cx, cy, cz, l, w, h, yaw, vx, vy.
pub const BOX_WIDTH: usize = 9;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatVoxels {
    /// M x 3 (ix, iy, iz).
    pub coords: Vec<i32>,
    /// M x 5 mean features.
    pub features: Vec<f32>,
    pub counts: Vec<i32>,
    pub grid_dims: [usize; 3],
}

fn check_rows(len: usize, width: usize, what: &str) -> Result<usize> {
    if len % width != 0 {
        return Err(Error::Shape(format!(
            "{what}: buffer of {len} values is not a multiple of row width {width}"
        )));
    }
    Ok(len / width)
}

/// Voxelize an N x 5 `f32` buffer.
pub fn voxelize_flat(points: &[f32], cfg: &VoxelConfig) -> Result<FlatVoxels> {
    check_rows(points.len(), POINT_WIDTH, "points")?;
    let pts: Vec<Point> = points
        .chunks_exact(POINT_WIDTH)
        .map(|r| Point::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64, r[4] as f64))
        .collect();
    let v = voxelize(&pts, cfg);
    Ok(FlatVoxels {
        coords: v.coords.iter().flatten().map(|&c| c as i32).collect(),
        features: v.features.iter().flatten().map(|&f| f as f32).collect(),
        counts: v.counts.iter().map(|&c| c as i32).collect(),
        grid_dims: v.grid_dims,
    })
}

/// Class-balanced epoch over an N x 10 matrix of per-sample instance counts
/// (classes in `ClassId::ALL` order). Returns row indices.
pub fn build_epoch_flat(counts: &[u32], fraction: f64, seed: u64) -> Result<Vec<u32>> {
    let n = check_rows(counts.len(), NUM_CLASSES, "counts")?;
    let rows = counts.chunks_exact(NUM_CLASSES).enumerate().map(|(i, r)| {
        let mut c = [0usize; NUM_CLASSES];
        for (dst, &src) in c.iter_mut().zip(r) {
            *dst = src as usize;
        }
        (i.to_string(), c)
    });
    let index = DatasetIndex::from_counts(rows)?;
    debug_assert_eq!(index.len(), n);
    let plan = build_epoch(&index, fraction, seed)?;
    Ok(plan
        .sample_ids
        .iter()
        .map(|id| id.parse::<u32>().expect("row ids are integers"))
        .collect())
}

/// Targets of one group, one row per anchor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatTargets {
    /// -1 ignore, 0 background, k + 1 for the k-th class of the group.
    pub labels: Vec<i32>,
    /// n x 9 residuals; zero rows for non-foreground anchors.
    pub reg: Vec<f32>,
    pub reg_weight: Vec<f32>,
    /// Direction bin, -1 for non-foreground anchors.
    pub dir: Vec<i32>,
}

fn parse_boxes(boxes: &[f32], classes: &[i32]) -> Result<Vec<Box3D>> {
    let n = check_rows(boxes.len(), BOX_WIDTH, "boxes")?;
    if classes.len() != n {
        return Err(Error::Shape(format!("{} class ids for {n} boxes", classes.len())));
    }
    boxes
        .chunks_exact(BOX_WIDTH)
        .zip(classes)
        .map(|(r, &c)| {
            let class = usize::try_from(c)
                .ok()
                .and_then(ClassId::from_index)
                .ok_or_else(|| Error::InvalidLabel(format!("class id {c} out of range")))?;
            let r: [f64; BOX_WIDTH] = std::array::from_fn(|i| r[i] as f64);
            Ok(Box3D::new(class, [r[0], r[1], r[2]], [r[3], r[4], r[5]], r[6]).with_velocity(r[7], r[8]))
        })
        .collect()
}

/// [`assign_all`] over an N x 9 box buffer and N class indices.
pub fn assign_targets_flat(
    anchors: &AnchorSet,
    boxes: &[f32],
    classes: &[i32],
    spec: &GroupSpec,
    direction_offset: f64,
) -> Result<Vec<FlatTargets>> {
    let labels = parse_boxes(boxes, classes)?;
    let sets = assign_all(anchors, &labels, spec, direction_offset)?;
    Ok(sets
        .iter()
        .zip(&anchors.groups)
        .map(|(t, g)| FlatTargets {
            labels: t
                .cls
                .iter()
                .map(|c| match c {
                    AnchorTarget::Ignore => -1,
                    AnchorTarget::Background => 0,
                    AnchorTarget::Foreground(class) => {
                        g.classes.iter().position(|k| k == class).expect("class in group") as i32 + 1
                    }
                })
                .collect(),
            reg: t
                .reg
                .iter()
                .flat_map(|r| r.unwrap_or([0.0; CODE_SIZE]).map(|v| v as f32))
                .collect(),
            reg_weight: t.reg_weight.iter().map(|&w| w as f32).collect(),
            dir: t.dir.iter().map(|d| d.map_or(-1, i32::from)).collect(),
        })
        .collect())
}

/// Raw outputs of one group as borrowed buffers.
#[derive(Debug, Clone, Copy)]
pub struct FlatGroupOutput<'a> {
    /// n x k class probabilities.
    pub scores: &'a [f32],
    /// n x 9 residuals.
    pub reg: &'a [f32],
    /// n direction bins.
    pub dir: &'a [i32],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatDetections {
    /// M x 9 boxes.
    pub boxes: Vec<f32>,
    pub scores: Vec<f32>,
    pub classes: Vec<i32>,
    pub groups: Vec<i32>,
}

pub fn decode_flat(
    anchors: &AnchorSet,
    outputs: &[FlatGroupOutput<'_>],
    cfg: &NmsConfig,
    direction_offset: f64,
) -> Result<FlatDetections> {
    if outputs.len() != anchors.groups.len() {
        return Err(Error::Shape(format!(
            "{} output groups for {} anchor groups",
            outputs.len(),
            anchors.groups.len()
        )));
    }
    let mut native = Vec::with_capacity(outputs.len());
    for (g, (o, a)) in outputs.iter().zip(&anchors.groups).enumerate() {
        let n = a.len();
        let k = a.classes.len();
        if o.scores.len() != n * k || o.reg.len() != n * CODE_SIZE || o.dir.len() != n {
            return Err(Error::Shape(format!(
                "group {g}: expected {n}x{k} scores, {n}x{CODE_SIZE} residuals, {n} bins; got {}, {}, {}",
                o.scores.len(),
                o.reg.len(),
                o.dir.len()
            )));
        }
        native.push(GroupOutput {
            scores: o.scores.chunks_exact(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect(),
            reg: o
                .reg
                .chunks_exact(CODE_SIZE)
                .map(|r| std::array::from_fn(|i| r[i] as f64))
                .collect(),
            dir: o.dir.iter().map(|&d| u8::from(d != 0)).collect(),
        });
    }
    let dets = decode_and_suppress(anchors, &native, cfg, direction_offset)?;
    let mut out = FlatDetections::default();
    for d in dets.iter() {
        let b = &d.bbox;
        out.boxes
            .extend([b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, b.vx, b.vy].map(|v| v as f32));
        out.scores.push(b.score as f32);
        out.classes.push(b.class.index() as i32);
        out.groups.push(d.group as i32);
    }
    Ok(out)
}
