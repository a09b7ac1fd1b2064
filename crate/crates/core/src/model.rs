//! Shared domain types: points, oriented boxes, the class catalog, and the
//! angle/box arithmetic everything else builds on.
//!
//! Conventions: yaw is measured counter-clockwise from +x, boxes store yaw
//! wrapped to (-pi, pi], and `l` runs along the heading while `w` is lateral.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of detection classes.
pub const NUM_CLASSES: usize = 10;

/// Largest time lag a point may carry, in seconds.
pub const MAX_TIME_LAG: f64 = 0.45;

/// A single lidar return in the keyframe frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    /// Time lag relative to the keyframe, seconds.
    pub dt: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64, dt: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity,
            dt,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.intensity.is_finite()
            && (0.0..=MAX_TIME_LAG).contains(&self.dt)
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.x, self.y, self.z, self.intensity, self.dt]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassId {
    Car,
    Truck,
    Bus,
    Trailer,
    ConstructionVehicle,
    Pedestrian,
    Motorcycle,
    Bicycle,
    TrafficCone,
    Barrier,
}

impl ClassId {
    pub const ALL: [ClassId; NUM_CLASSES] = [
        ClassId::Car,
        ClassId::Truck,
        ClassId::Bus,
        ClassId::Trailer,
        ClassId::ConstructionVehicle,
        ClassId::Pedestrian,
        ClassId::Motorcycle,
        ClassId::Bicycle,
        ClassId::TrafficCone,
        ClassId::Barrier,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Car => "car",
            ClassId::Truck => "truck",
            ClassId::Bus => "bus",
            ClassId::Trailer => "trailer",
            ClassId::ConstructionVehicle => "construction_vehicle",
            ClassId::Pedestrian => "pedestrian",
            ClassId::Motorcycle => "motorcycle",
            ClassId::Bicycle => "bicycle",
            ClassId::TrafficCone => "traffic_cone",
            ClassId::Barrier => "barrier",
        }
    }

    pub fn is_cycle(self) -> bool {
        matches!(self, ClassId::Bicycle | ClassId::Motorcycle)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Attribute {
    #[serde(rename = "vehicle.moving")]
    VehicleMoving,
    #[serde(rename = "vehicle.parked")]
    VehicleParked,
    #[serde(rename = "vehicle.stopped")]
    VehicleStopped,
    #[serde(rename = "cycle.with_rider")]
    CycleWithRider,
    #[serde(rename = "cycle.without_rider")]
    CycleWithoutRider,
    #[serde(rename = "pedestrian.moving")]
    PedestrianMoving,
    #[serde(rename = "pedestrian.standing")]
    PedestrianStanding,
    #[serde(rename = "pedestrian.sitting_lying_down")]
    PedestrianSittingLyingDown,
}

/// Oriented 3D box with velocity. Detections additionally carry a score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub class: ClassId,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    #[serde(default)]
    pub attribute: Option<Attribute>,
    #[serde(default)]
    pub score: f64,
}

impl Box3D {
    /// A static box with no attribute and zero score.
    pub fn new(class: ClassId, center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        Self {
            class,
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: size[0],
            w: size[1],
            h: size[2],
            yaw: wrap_to_pi(yaw),
            vx: 0.0,
            vy: 0.0,
            attribute: None,
            score: 0.0,
        }
    }

    pub fn with_velocity(mut self, vx: f64, vy: f64) -> Self {
        self.vx = vx;
        self.vy = vy;
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_attribute(mut self, attribute: Option<Attribute>) -> Self {
        self.attribute = attribute;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw, self.vx, self.vy,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLabel(format!("non-finite field in {self:?}")));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidLabel(format!(
                "non-positive size ({}, {}, {}) for {}",
                self.l, self.w, self.h, self.class
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.l, self.w, self.h]
    }

    pub fn bottom_z(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn bev_circumradius(&self) -> f64 {
        0.5 * self.l.hypot(self.w)
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Express a world point in this box's local frame (centered, heading along +x).
    pub fn to_local(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, z - self.cz]
    }

    /// Inverse of [`Box3D::to_local`].
    pub fn to_world(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * x - s * y + self.cx, s * x + c * y + self.cy, z + self.cz]
    }
}

/// Wrap `theta` into `[0, period)`.
pub fn wrap_angle(theta: f64, period: f64) -> Result<f64> {
    if !theta.is_finite() || !period.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "wrap_angle needs finite inputs, got theta={theta}, period={period}"
        )));
    }
    if period <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "wrap_angle period must be positive, got {period}"
        )));
    }
    let r = theta.rem_euclid(period);
    // rem_euclid can round up to `period` for tiny negative inputs
    Ok(if r >= period { 0.0 } else { r })
}

/// Wrap a finite angle into (-pi, pi]. Values already in range are returned unchanged.
pub fn wrap_to_pi(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Wrap into (-period/2, period/2].
pub(crate) fn wrap_centered(theta: f64, period: f64) -> f64 {
    let half = 0.5 * period;
    if theta > -half && theta <= half {
        return theta;
    }
    let r = (theta + half).rem_euclid(period) - half;
    if r <= -half {
        r + period
    } else {
        r
    }
}

/// BEV corners of a box, counter-clockwise, starting at the (+l/2, +w/2) corner.
pub fn box_corners_bev(b: &Box3D) -> [[f64; 2]; 4] {
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let (s, c) = b.yaw.sin_cos();
    [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
        .map(|[x, y]| [c * x - s * y + b.cx, s * x + c * y + b.cy])
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    /// Anchor (l, w, h), meters.
    pub anchor_size: [f64; 3],
    /// Anchor center height, meters.
    pub anchor_z: f64,
    /// Most common attribute, or none for attribute-less classes.
    #[serde(default)]
    pub default_attribute: Option<Attribute>,
}

/// Per-class static data: anchor priors and default attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<ClassId, ClassInfo>",
    into = "BTreeMap<ClassId, ClassInfo>"
)]
pub struct ClassCatalog {
    entries: [ClassInfo; NUM_CLASSES],
}

impl ClassCatalog {
    pub fn classes(&self) -> &'static [ClassId; NUM_CLASSES] {
        &ClassId::ALL
    }

    pub fn info(&self, class: ClassId) -> &ClassInfo {
        &self.entries[class.index()]
    }

    pub fn info_mut(&mut self, class: ClassId) -> &mut ClassInfo {
        &mut self.entries[class.index()]
    }

    pub fn default_attribute(&self, class: ClassId) -> Option<Attribute> {
        self.info(class).default_attribute
    }

    pub fn validate(&self) -> Result<()> {
        for (class, info) in ClassId::ALL.iter().zip(&self.entries) {
            if info.anchor_size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::InvalidConfig(format!(
                    "anchor size for {class} must be positive, got {:?}",
                    info.anchor_size
                )));
            }
            if !info.anchor_z.is_finite() {
                return Err(Error::InvalidConfig(format!("anchor z for {class} is not finite")));
            }
        }
        Ok(())
    }
}

impl Default for ClassCatalog {
    /// Class-mean anchor sizes and heights for nuScenes-style data.
    fn default() -> Self {
        use Attribute::*;
        let e = |l, w, h, z, a| ClassInfo {
            anchor_size: [l, w, h],
            anchor_z: z,
            default_attribute: a,
        };
        Self {
            entries: [
                e(4.63, 1.97, 1.74, -0.95, Some(VehicleParked)),
                e(6.93, 2.51, 2.84, -0.40, Some(VehicleParked)),
                e(10.5, 2.94, 3.47, -0.085, Some(VehicleMoving)),
                e(12.29, 2.90, 3.87, 0.115, Some(VehicleParked)),
                e(6.37, 2.85, 3.19, -0.225, Some(VehicleParked)),
                e(0.73, 0.67, 1.77, -0.935, Some(PedestrianMoving)),
                e(2.11, 0.77, 1.47, -1.085, Some(CycleWithoutRider)),
                e(1.70, 0.60, 1.28, -1.18, Some(CycleWithoutRider)),
                e(0.41, 0.41, 1.07, -1.285, None),
                e(0.50, 2.53, 0.98, -1.33, None),
            ],
        }
    }
}

impl TryFrom<BTreeMap<ClassId, ClassInfo>> for ClassCatalog {
    type Error = Error;

    fn try_from(map: BTreeMap<ClassId, ClassInfo>) -> Result<Self> {
        let mut catalog = ClassCatalog::default();
        for (class, info) in map {
            *catalog.info_mut(class) = info;
        }
        catalog.validate()?;
        Ok(catalog)
    }
}

impl From<ClassCatalog> for BTreeMap<ClassId, ClassInfo> {
    fn from(catalog: ClassCatalog) -> Self {
        ClassId::ALL.into_iter().zip(catalog.entries).collect()
    }
}

/// Fixed-size per-class array indexed by [`ClassId`].
pub type PerClass<T> = [T; NUM_CLASSES];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn wrap_angle_examples() {
        assert_eq!(wrap_angle(0.0, 2.0 * PI).unwrap(), 0.0);
        assert_abs_diff_eq!(
            wrap_angle(-PI / 4.0, 2.0 * PI).unwrap(),
            7.0 * PI / 4.0,
            epsilon = 1e-12
        );
        // repeated subtraction oracle
        let mut t = 5.5 * PI;
        while t >= PI {
            t -= PI;
        }
        assert_abs_diff_eq!(wrap_angle(5.5 * PI, PI).unwrap(), t, epsilon = 1e-12);
        assert_abs_diff_eq!(t, 0.5 * PI, epsilon = 1e-12);
    }

    #[test]
    fn wrap_angle_rejects_bad_input() {
        assert!(wrap_angle(f64::NAN, 1.0).is_err());
        assert!(wrap_angle(f64::INFINITY, 1.0).is_err());
        assert!(wrap_angle(1.0, 0.0).is_err());
        assert!(wrap_angle(1.0, -1.0).is_err());
    }

    #[test]
    fn wrap_angle_tiny_negative_stays_below_period() {
        let r = wrap_angle(-1e-300, 2.0 * PI).unwrap();
        assert!((0.0..2.0 * PI).contains(&r));
    }

    #[test]
    fn wrap_to_pi_range() {
        assert_eq!(wrap_to_pi(PI), PI);
        assert_abs_diff_eq!(wrap_to_pi(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_to_pi(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_eq!(wrap_to_pi(0.3), 0.3);
    }

    #[test]
    fn corners_axis_aligned_unit_square() {
        let b = Box3D::new(ClassId::Car, [0.0; 3], [1.0, 1.0, 1.0], 0.0);
        let c = box_corners_bev(&b);
        assert_eq!(c, [[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]);
    }

    #[test]
    fn corners_quarter_turn_same_set() {
        let b = Box3D::new(ClassId::Car, [0.0; 3], [1.0, 1.0, 1.0], PI / 2.0);
        let c = box_corners_bev(&b);
        let base = [[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]];
        for p in base {
            assert!(c
                .iter()
                .any(|q| (q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12));
        }
        // order rotated by one position
        assert_abs_diff_eq!(c[0][0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c[0][1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn corners_rotated_rectangle() {
        let yaw = PI / 4.0;
        let b = Box3D::new(ClassId::Car, [0.0; 3], [2.0, 1.0, 1.0], yaw);
        let c = box_corners_bev(&b);
        let (s, co) = yaw.sin_cos();
        let expected = [[1.0, 0.5], [-1.0, 0.5], [-1.0, -0.5], [1.0, -0.5]]
            .map(|[x, y]: [f64; 2]| [co * x - s * y, s * x + co * y]);
        for (a, e) in c.iter().zip(expected) {
            assert_abs_diff_eq!(a[0], e[0], epsilon = 1e-12);
            assert_abs_diff_eq!(a[1], e[1], epsilon = 1e-12);
        }
        assert!(polygon_area(&c) > 0.0, "counter-clockwise");
    }

    #[test]
    fn local_world_round_trip() {
        let b = Box3D::new(ClassId::Bus, [3.0, -2.0, -1.0], [10.0, 3.0, 3.5], 0.7);
        let [lx, ly, lz] = b.to_local(4.0, 1.0, 0.5);
        let [x, y, z] = b.to_world(lx, ly, lz);
        assert_abs_diff_eq!(x, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn class_names_round_trip() {
        for c in ClassId::ALL {
            assert_eq!(c.name().parse::<ClassId>().unwrap(), c);
            assert_eq!(ClassId::from_index(c.index()), Some(c));
        }
        assert!("frob".parse::<ClassId>().is_err());
    }

    #[test]
    fn box_validation() {
        let mut b = Box3D::new(ClassId::Car, [0.0; 3], [4.0, 2.0, 1.5], 0.0);
        assert!(b.validate().is_ok());
        b.w = 0.0;
        assert!(b.validate().is_err());
        b.w = 2.0;
        b.cx = f64::NAN;
        assert!(b.validate().is_err());
    }

    #[test]
    fn catalog_defaults_are_valid() {
        let cat = ClassCatalog::default();
        cat.validate().unwrap();
        assert_eq!(cat.default_attribute(ClassId::Barrier), None);
        assert_eq!(
            cat.default_attribute(ClassId::Bicycle),
            Some(Attribute::CycleWithoutRider)
        );
        // car anchor sits on a ground plane at about -1.82 m
        let car = cat.info(ClassId::Car);
        assert_abs_diff_eq!(car.anchor_z - 0.5 * car.anchor_size[2], -1.82, epsilon = 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn wrap_angle_idempotent(theta in -1e4f64..1e4, period in 0.01f64..10.0) {
                let once = wrap_angle(theta, period).unwrap();
                prop_assert!(once >= 0.0 && once < period);
                prop_assert_eq!(wrap_angle(once, period).unwrap(), once);
            }

            #[test]
            fn corner_area_matches_size(
                l in 0.05f64..20.0, w in 0.05f64..20.0, yaw in -10.0f64..10.0,
                cx in -50.0f64..50.0, cy in -50.0f64..50.0,
            ) {
                let b = Box3D::new(ClassId::Truck, [cx, cy, 0.0], [l, w, 1.0], yaw);
                let area = polygon_area(&box_corners_bev(&b));
                prop_assert!((area - l * w).abs() <= 1e-9, "area {} vs {}", area, l * w);
            }
        }
    }
}
