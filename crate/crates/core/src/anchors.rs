//! Class groups, anchor layout, target assignment and the box residual
//! encoding used by the multi-group detection head.
//!
//! Anchors of a group are laid out cell-major: the anchor index is
//! `((iy * nx + ix) * classes_in_group + class_slot) * 2 + rotation`, with
//! rotation 0 at yaw 0 and rotation 1 at yaw pi/2.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::VoxelConfig;
use crate::error::{Error, Result};
use crate::geometry::bev_iou;
use crate::model::{wrap_angle, wrap_centered, wrap_to_pi, Box3D, ClassCatalog, ClassId, NUM_CLASSES};

/// Number of regression targets per anchor: x, y, z, l, w, h, yaw, vx, vy.
pub const CODE_SIZE: usize = 9;

/// Anchor rotations per class.
pub const ROTATIONS: [f64; 2] = [0.0, FRAC_PI_2];

pub type BoxCode = [f64; CODE_SIZE];

/// Partition of the classes into detection-head groups, with per-class
/// matching thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupSpec {
    layout: Vec<Vec<ClassId>>,
    positive_threshold: BTreeMap<ClassId, f64>,
    /// Negative threshold is the positive threshold minus this margin.
    negative_margin: f64,
}

fn default_positive_threshold(class: ClassId) -> f64 {
    match class {
        ClassId::Car | ClassId::Pedestrian | ClassId::TrafficCone | ClassId::Barrier => 0.6,
        _ => 0.4,
    }
}

impl Default for GroupSpec {
    fn default() -> Self {
        use ClassId::*;
        Self {
            layout: vec![
                vec![Car],
                vec![Truck, ConstructionVehicle],
                vec![Bus, Trailer],
                vec![Barrier],
                vec![Motorcycle, Bicycle],
                vec![Pedestrian, TrafficCone],
            ],
            positive_threshold: ClassId::ALL
                .into_iter()
                .map(|c| (c, default_positive_threshold(c)))
                .collect(),
            negative_margin: 0.15,
        }
    }
}

impl GroupSpec {
    pub fn new(layout: Vec<Vec<ClassId>>) -> Result<Self> {
        let spec = Self {
            layout,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_positive_threshold(mut self, class: ClassId, threshold: f64) -> Self {
        self.positive_threshold.insert(class, threshold);
        self
    }

    pub fn groups(&self) -> &[Vec<ClassId>] {
        &self.layout
    }

    /// Group holding `class`. Panics if the grouping was not validated.
    pub fn group_of(&self, class: ClassId) -> usize {
        self.layout
            .iter()
            .position(|g| g.contains(&class))
            .expect("validated group spec covers every class")
    }

    pub fn positive_threshold(&self, class: ClassId) -> f64 {
        self.positive_threshold
            .get(&class)
            .copied()
            .unwrap_or_else(|| default_positive_threshold(class))
    }

    pub fn negative_threshold(&self, class: ClassId) -> f64 {
        self.positive_threshold(class) - self.negative_margin
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [0usize; NUM_CLASSES];
        for group in &self.layout {
            if group.is_empty() {
                return Err(Error::InvalidConfig("empty class group".into()));
            }
            for c in group {
                seen[c.index()] += 1;
            }
        }
        let bad: Vec<String> = ClassId::ALL
            .into_iter()
            .filter(|c| seen[c.index()] != 1)
            .map(|c| format!("{c} (in {} groups)", seen[c.index()]))
            .collect();
        if !bad.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "groups must partition the classes: {}",
                bad.join(", ")
            )));
        }
        for (c, t) in &self.positive_threshold {
            if !(0.0..=1.0).contains(t) {
                return Err(Error::InvalidConfig(format!("threshold for {c} out of [0, 1]: {t}")));
            }
        }
        if !(self.negative_margin >= 0.0 && self.negative_margin.is_finite()) {
            return Err(Error::InvalidConfig("negative_margin must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Angular offset applied before binning headings into two directions.
    pub direction_offset: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            direction_offset: FRAC_PI_4,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.direction_offset.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig("direction_offset must be finite".into()))
        }
    }
}

/// Anchors of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAnchors {
    pub classes: Vec<ClassId>,
    pub anchors: Vec<Box3D>,
    /// Feature map (nx, ny); zero for hand-built anchor lists.
    pub grid: [usize; 2],
}

impl GroupAnchors {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub groups: Vec<GroupAnchors>,
}

impl AnchorSet {
    pub fn total(&self) -> usize {
        self.groups.iter().map(GroupAnchors::len).sum()
    }
}

/// Tile every group's anchors over the strided BEV feature map: one size per
/// class, two headings, zero velocity, centered in each cell.
pub fn generate_anchors(
    voxel: &VoxelConfig,
    catalog: &ClassCatalog,
    spec: &GroupSpec,
) -> Result<AnchorSet> {
    voxel.validate()?;
    spec.validate()?;
    let [nx, ny] = voxel.feature_map_dims();
    let step = [0, 1].map(|i| voxel.voxel_size[i] * voxel.feature_stride as f64);
    let lo = voxel.range.min;

    let groups = spec
        .groups()
        .iter()
        .map(|classes| {
            let mut anchors = Vec::with_capacity(nx * ny * classes.len() * ROTATIONS.len());
            for iy in 0..ny {
                let y = lo[1] + (iy as f64 + 0.5) * step[1];
                for ix in 0..nx {
                    let x = lo[0] + (ix as f64 + 0.5) * step[0];
                    for &class in classes {
                        let info = catalog.info(class);
                        for yaw in ROTATIONS {
                            anchors.push(Box3D::new(
                                class,
                                [x, y, info.anchor_z],
                                info.anchor_size,
                                yaw,
                            ));
                        }
                    }
                }
            }
            GroupAnchors {
                classes: classes.clone(),
                anchors,
                grid: [nx, ny],
            }
        })
        .collect();
    Ok(AnchorSet { groups })
}

/// Direction bin of a heading: 0 when `wrap(yaw - offset, 2*pi)` lies in [0, pi).
pub fn direction_target(yaw: f64, offset: f64) -> u8 {
    let shifted = wrap_angle(yaw - offset, 2.0 * PI).unwrap_or(0.0);
    if shifted < PI {
        0
    } else {
        1
    }
}

/// Residual of `gt` relative to `anchor`. Centers are normalized by the
/// anchor's BEV diagonal (x, y) and height (z); sizes are log ratios; yaw is
/// taken modulo pi into (-pi/2, pi/2]; velocities are raw.
pub fn encode_box(anchor: &Box3D, gt: &Box3D) -> Result<BoxCode> {
    if !(gt.l > 0.0 && gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::InvalidLabel(format!(
            "non-positive size ({}, {}, {}) for {}",
            gt.l, gt.w, gt.h, gt.class
        )));
    }
    let diag = anchor.l.hypot(anchor.w);
    Ok([
        (gt.cx - anchor.cx) / diag,
        (gt.cy - anchor.cy) / diag,
        (gt.cz - anchor.cz) / anchor.h,
        (gt.l / anchor.l).ln(),
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
        wrap_centered(gt.yaw - anchor.yaw, PI),
        gt.vx,
        gt.vy,
    ])
}

/// Inverse of [`encode_box`]; the direction bin resolves the pi ambiguity.
pub fn decode_box(anchor: &Box3D, code: &BoxCode, dir_bin: u8, offset: f64) -> Box3D {
    let diag = anchor.l.hypot(anchor.w);
    let mut yaw = anchor.yaw + code[6];
    if direction_target(yaw, offset) != dir_bin {
        yaw += PI;
    }
    Box3D {
        class: anchor.class,
        cx: anchor.cx + code[0] * diag,
        cy: anchor.cy + code[1] * diag,
        cz: anchor.cz + code[2] * anchor.h,
        l: anchor.l * code[3].exp(),
        w: anchor.w * code[4].exp(),
        h: anchor.h * code[5].exp(),
        yaw: wrap_to_pi(yaw),
        vx: code[7],
        vy: code[8],
        attribute: None,
        score: anchor.score,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorTarget {
    Background,
    Ignore,
    Foreground(ClassId),
}

/// Training targets for the anchors of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub cls: Vec<AnchorTarget>,
    /// Encoded residual, present only for foreground anchors.
    pub reg: Vec<Option<BoxCode>>,
    /// Direction bin, present only for foreground anchors.
    pub dir: Vec<Option<u8>>,
    /// 1 for foreground anchors, 0 otherwise.
    pub reg_weight: Vec<f64>,
    /// Index into the label list of the matched ground truth.
    pub matched: Vec<Option<usize>>,
}

impl TargetSet {
    pub fn positives(&self) -> usize {
        self.cls
            .iter()
            .filter(|t| matches!(t, AnchorTarget::Foreground(_)))
            .count()
    }

    pub fn count(&self, target: AnchorTarget) -> usize {
        self.cls.iter().filter(|t| **t == target).count()
    }
}

/// Assign one group's anchors to the labels of that group's classes.
///
/// An anchor matches only labels of its own class. It is foreground when its
/// best IoU reaches the class's positive threshold, background below the
/// negative threshold, and ignored in between. Each label is also
/// force-matched to its highest-IoU anchor (lowest index on ties) as long as
/// that IoU is positive.
pub fn assign_targets(
    group: &GroupAnchors,
    labels: &[Box3D],
    spec: &GroupSpec,
    direction_offset: f64,
) -> Result<TargetSet> {
    for l in labels {
        l.validate()?;
    }
    let n = group.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_label: Vec<Option<usize>> = vec![None; n];
    let mut forced: Vec<Option<usize>> = vec![None; n];

    let relevant: Vec<usize> = (0..labels.len())
        .filter(|&j| group.classes.contains(&labels[j].class))
        .collect();

    // per-label IoU rows, computed in parallel, merged in label order
    let rows: Vec<Vec<(usize, f64)>> = relevant
        .par_iter()
        .map(|&j| {
            let gt = &labels[j];
            let reach = gt.bev_circumradius();
            group
                .anchors
                .iter()
                .enumerate()
                .filter(|(_, a)| a.class == gt.class)
                .filter_map(|(i, a)| {
                    let r = reach + a.bev_circumradius();
                    let (dx, dy) = (a.cx - gt.cx, a.cy - gt.cy);
                    if dx * dx + dy * dy > r * r {
                        return None;
                    }
                    let iou = bev_iou(a, gt);
                    (iou > 0.0).then_some((i, iou))
                })
                .collect()
        })
        .collect();

    for (&j, row) in relevant.iter().zip(&rows) {
        let mut label_best: Option<(usize, f64)> = None;
        for &(i, iou) in row {
            if iou > best_iou[i] {
                best_iou[i] = iou;
                best_label[i] = Some(j);
            }
            if label_best.is_none_or(|(_, b)| iou > b) {
                label_best = Some((i, iou));
            }
        }
        if let Some((i, _)) = label_best {
            forced[i] = Some(j);
        }
    }

    let mut out = TargetSet {
        cls: Vec::with_capacity(n),
        reg: Vec::with_capacity(n),
        dir: Vec::with_capacity(n),
        reg_weight: Vec::with_capacity(n),
        matched: Vec::with_capacity(n),
    };
    for (i, anchor) in group.anchors.iter().enumerate() {
        let class = anchor.class;
        let matched = forced[i].or_else(|| {
            (best_iou[i] >= spec.positive_threshold(class))
                .then_some(best_label[i])
                .flatten()
        });
        match matched {
            Some(j) => {
                let gt = &labels[j];
                out.cls.push(AnchorTarget::Foreground(gt.class));
                out.reg.push(Some(encode_box(anchor, gt)?));
                out.dir.push(Some(direction_target(gt.yaw, direction_offset)));
                out.reg_weight.push(1.0);
                out.matched.push(Some(j));
            }
            None => {
                let t = if best_iou[i] < spec.negative_threshold(class) {
                    AnchorTarget::Background
                } else {
                    AnchorTarget::Ignore
                };
                out.cls.push(t);
                out.reg.push(None);
                out.dir.push(None);
                out.reg_weight.push(0.0);
                out.matched.push(None);
            }
        }
    }
    Ok(out)
}

/// [`assign_targets`] for every group of an anchor set.
pub fn assign_all(
    anchors: &AnchorSet,
    labels: &[Box3D],
    spec: &GroupSpec,
    direction_offset: f64,
) -> Result<Vec<TargetSet>> {
    anchors
        .groups
        .iter()
        .map(|g| assign_targets(g, labels, spec, direction_offset))
        .collect()
}
