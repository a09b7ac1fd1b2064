//! Pipeline configuration. Every section has defaults, so an empty TOML
//! document yields the reference setup (0.1 x 0.1 x 0.2 m voxels over
//! [-50.4, 50.4] x [-51.2, 51.2] x [-5, 3] m, six class groups, and so on).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorConfig, GroupSpec};
use crate::decode::NmsConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::geometry::AugmentConfig;
use crate::ground::RansacParams;
use crate::gt_aug::GtAugConfig;
use crate::loss::{LossConfig, OneCycle};
use crate::model::ClassCatalog;

const DIVISIBILITY_EPS: f64 = 1e-9;

/// Axis-aligned region of interest, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for PointRange {
    fn default() -> Self {
        Self {
            min: [-50.4, -51.2, -5.0],
            max: [50.4, 51.2, 3.0],
        }
    }
}

impl PointRange {
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.max[i] - self.min[i])
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x < self.max[0] && y >= self.min[1] && y < self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelConfig {
    pub range: PointRange,
    pub voxel_size: [f64; 3],
    pub max_points_per_voxel: usize,
    pub max_voxels: usize,
    /// BEV downscale from the voxel grid to the detection feature map.
    pub feature_stride: usize,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self {
            range: PointRange::default(),
            voxel_size: [0.1, 0.1, 0.2],
            max_points_per_voxel: 10,
            max_voxels: 60_000,
            feature_stride: 8,
        }
    }
}

impl VoxelConfig {
    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (lo, hi, size) = (self.range.min[axis], self.range.max[axis], self.voxel_size[axis]);
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidConfig(format!(
                    "range axis {axis}: max ({hi}) must exceed min ({lo})"
                )));
            }
            if !(size.is_finite() && size > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "voxel size axis {axis} must be positive, got {size}"
                )));
            }
            let cells = (hi - lo) / size;
            if (cells - cells.round()).abs() > DIVISIBILITY_EPS * cells.max(1.0) {
                return Err(Error::InvalidConfig(format!(
                    "range axis {axis} extent {} is not a multiple of voxel size {size}",
                    hi - lo
                )));
            }
        }
        if self.max_points_per_voxel == 0 || self.max_voxels == 0 {
            return Err(Error::InvalidConfig("voxel caps must be at least 1".into()));
        }
        if self.feature_stride == 0 {
            return Err(Error::InvalidConfig("feature_stride must be at least 1".into()));
        }
        let [nx, ny, _] = self.grid_dims();
        if nx % self.feature_stride != 0 || ny % self.feature_stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "BEV grid {nx} x {ny} is not divisible by feature stride {}",
                self.feature_stride
            )));
        }
        Ok(())
    }

    /// Voxel grid dimensions (nx, ny, nz).
    pub fn grid_dims(&self) -> [usize; 3] {
        let e = self.range.extent();
        [0, 1, 2].map(|i| (e[i] / self.voxel_size[i]).round() as usize)
    }

    /// BEV feature map dimensions (nx, ny) after the stride.
    pub fn feature_map_dims(&self) -> [usize; 2] {
        let [nx, ny, _] = self.grid_dims();
        [nx / self.feature_stride, ny / self.feature_stride]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub voxel: VoxelConfig,
    pub catalog: ClassCatalog,
    pub groups: GroupSpec,
    pub anchors: AnchorConfig,
    pub nms: NmsConfig,
    pub schedule: OneCycle,
    pub loss: LossConfig,
    pub ransac: RansacParams,
    pub gt_aug: GtAugConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            voxel: VoxelConfig::default(),
            catalog: ClassCatalog::default(),
            groups: GroupSpec::default(),
            anchors: AnchorConfig::default(),
            nms: NmsConfig::default(),
            schedule: OneCycle::default(),
            loss: LossConfig::default(),
            ransac: RansacParams::default(),
            gt_aug: GtAugConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.voxel.validate()?;
        self.catalog.validate()?;
        self.groups.validate()?;
        self.anchors.validate()?;
        self.nms.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        self.ransac.validate()?;
        self.gt_aug.validate()?;
        self.augment.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::corrupt(path, msg),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
