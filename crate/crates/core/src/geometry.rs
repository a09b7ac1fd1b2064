//! Global scene augmentation and the BEV geometry primitives shared by
//! database cropping, target assignment and NMS.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::PointCloudSample;
use crate::error::{Error, Result};
use crate::model::{box_corners_bev, polygon_area, wrap_to_pi, Box3D, Point};

/// Boundary-inclusive containment of each point in `b`.
pub fn points_in_box(points: &[Point], b: &Box3D) -> Vec<bool> {
    points.iter().map(|p| point_in_box(p, b)).collect()
}

pub fn point_in_box(p: &Point, b: &Box3D) -> bool {
    let [lx, ly, lz] = b.to_local(p.x, p.y, p.z);
    lx.abs() <= 0.5 * b.l && ly.abs() <= 0.5 * b.w && lz.abs() <= 0.5 * b.h
}

/// Whether `(x, y)` falls inside the box's BEV rectangle (boundary inclusive).
pub fn point_in_box_bev(x: f64, y: f64, b: &Box3D) -> bool {
    let [lx, ly, _] = b.to_local(x, y, b.cz);
    lx.abs() <= 0.5 * b.l && ly.abs() <= 0.5 * b.w
}

const AREA_EPS: f64 = 1e-9;

/// Clip convex CCW `subject` against convex CCW `clip` (Sutherland-Hodgman).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let p = input[j];
            let q = input[(j + 1) % m];
            let sp = side(p);
            let sq = side(q);
            if sp >= 0.0 {
                output.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                output.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    output
}

/// Intersection area of the two boxes' BEV rectangles.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let reach = a.bev_circumradius() + b.bev_circumradius();
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    let poly = clip_convex(&box_corners_bev(a), &box_corners_bev(b));
    polygon_area(&poly).max(0.0)
}

/// Rotated BEV intersection-over-union in [0, 1].
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let area_a = a.bev_area();
    let area_b = b.bev_area();
    if area_a <= AREA_EPS || area_b <= AREA_EPS {
        return 0.0;
    }
    let inter = bev_intersection(a, b);
    if inter <= AREA_EPS {
        return 0.0;
    }
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

/// One draw of global scene augmentation. Applied as flip, scale, rotate, translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalTransform {
    /// Mirror across the x-axis (y -> -y).
    pub flip_y: bool,
    pub scale: f64,
    /// Rotation about +z, radians.
    pub rot_z: f64,
    pub translate: [f64; 3],
}

impl Default for GlobalTransform {
    fn default() -> Self {
        Self {
            flip_y: false,
            scale: 1.0,
            rot_z: 0.0,
            translate: [0.0; 3],
        }
    }
}

/// Sampling ranges for [`GlobalTransform`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub scale_range: [f64; 2],
    pub rotation_range: [f64; 2],
    /// Per-axis standard deviation; draws are truncated at three sigma.
    pub translation_std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            scale_range: [0.95, 1.05],
            rotation_range: [-0.3925, 0.3925],
            translation_std: [0.2, 0.2, 0.2],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_probability)
            && self.scale_range[0] > 0.0
            && self.scale_range[0] <= self.scale_range[1]
            && self.rotation_range[0] <= self.rotation_range[1]
            && self.translation_std.iter().all(|s| *s >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad augmentation ranges: {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GlobalTransform {
        let flip_y = rng.random_bool(self.flip_probability);
        let scale = uniform(rng, self.scale_range);
        let rot_z = uniform(rng, self.rotation_range);
        let translate = self.translation_std.map(|sigma| truncated_normal(rng, sigma));
        GlobalTransform {
            flip_y,
            scale,
            rot_z,
            translate,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 3.0 * sigma {
            return v;
        }
    }
}

/// Apply `t` jointly to the sample's points and labels. Stages whose parameter
/// is the identity are skipped, so the identity transform is bit-exact.
pub fn global_transform(sample: &PointCloudSample, t: &GlobalTransform) -> Result<PointCloudSample> {
    if !(t.scale.is_finite() && t.scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale must be positive, got {}",
            t.scale
        )));
    }
    if !t.rot_z.is_finite() || t.translate.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite transform".into()));
    }
    let mut out = sample.clone();

    if t.flip_y {
        for p in &mut out.points {
            p.y = -p.y;
        }
        for b in &mut out.labels {
            b.cy = -b.cy;
            b.yaw = wrap_to_pi(-b.yaw);
            b.vy = -b.vy;
        }
    }

    if t.scale != 1.0 {
        let s = t.scale;
        for p in &mut out.points {
            p.x *= s;
            p.y *= s;
            p.z *= s;
        }
        for b in &mut out.labels {
            b.cx *= s;
            b.cy *= s;
            b.cz *= s;
            b.l *= s;
            b.w *= s;
            b.h *= s;
            b.vx *= s;
            b.vy *= s;
        }
    }

    if t.rot_z != 0.0 {
        let (sn, cs) = t.rot_z.sin_cos();
        let rot = |x: f64, y: f64| (cs * x - sn * y, sn * x + cs * y);
        for p in &mut out.points {
            (p.x, p.y) = rot(p.x, p.y);
        }
        for b in &mut out.labels {
            (b.cx, b.cy) = rot(b.cx, b.cy);
            (b.vx, b.vy) = rot(b.vx, b.vy);
            b.yaw = wrap_to_pi(b.yaw + t.rot_z);
        }
    }

    if t.translate != [0.0; 3] {
        let [tx, ty, tz] = t.translate;
        for p in &mut out.points {
            p.x += tx;
            p.y += ty;
            p.z += tz;
        }
        for b in &mut out.labels {
            b.cx += tx;
            b.cy += ty;
            b.cz += tz;
        }
    }

    Ok(out)
}
