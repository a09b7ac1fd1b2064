//! Ground plane estimation: total least squares inside RANSAC.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Point;

/// Average ground height used when no plane can be fitted.
pub const DEFAULT_GROUND_Z: f64 = -1.82;

const VERTICAL_EPS: f64 = 1e-9;

/// Plane `a*x + b*y + c*z + d = 0` with unit normal pointing up (`c > 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    #[serde(default)]
    pub inlier_count: usize,
}

impl PlaneModel {
    /// Horizontal plane `z = height`.
    pub fn horizontal(height: f64) -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            c: 1.0,
            d: -height,
            inlier_count: 0,
        }
    }

    /// Fallback used when RANSAC finds no consensus.
    pub fn default_ground() -> Self {
        Self::horizontal(DEFAULT_GROUND_Z)
    }

    pub fn from_normal_and_point(normal: [f64; 3], point: [f64; 3]) -> Result<Self> {
        let n = Vector3::from(normal);
        let norm = n.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::DegeneratePlane(format!("zero normal {normal:?}")));
        }
        let mut n = n / norm;
        if n.z.abs() < VERTICAL_EPS {
            return Err(Error::VerticalPlane(n.z));
        }
        if n.z < 0.0 {
            n = -n;
        }
        let d = -n.dot(&Vector3::from(point));
        Ok(Self {
            a: n.x,
            b: n.y,
            c: n.z,
            d,
            inlier_count: 0,
        })
    }

    pub fn coefficients(&self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn normal(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }

    pub fn signed_distance(&self, x: f64, y: f64, z: f64) -> f64 {
        self.a * x + self.b * y + self.c * z + self.d
    }

    /// z of the plane above `(x, y)`.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        -(self.a * x + self.b * y + self.d) / self.c
    }

    /// Angle between this plane's normal and `other`'s, radians.
    pub fn normal_angle_to(&self, normal: [f64; 3]) -> f64 {
        let n = Vector3::from(normal).normalize();
        Vector3::from(self.normal()).dot(&n).clamp(-1.0, 1.0).acos()
    }

    pub fn is_valid(&self) -> bool {
        let norm2 = self.a * self.a + self.b * self.b + self.c * self.c;
        (norm2 - 1.0).abs() <= 1e-9 && self.c > 0.0 && self.d.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    /// Inlier distance, meters.
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 100,
            inlier_threshold: 0.1,
            min_inlier_fraction: 0.3,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("ransac iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold.is_finite() && self.inlier_threshold > 0.0) {
            return Err(Error::InvalidConfig("ransac threshold must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_inlier_fraction) {
            return Err(Error::InvalidConfig(
                "ransac min_inlier_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Total-least-squares plane: the normal is the eigenvector of the centered
/// covariance with the smallest eigenvalue.
pub fn fit_plane_lsq(points: &[Point]) -> Result<PlaneModel> {
    fit_plane_lsq_iter(points.iter(), points.len())
}

fn fit_plane_lsq_iter<'a>(
    points: impl Iterator<Item = &'a Point> + Clone,
    n: usize,
) -> Result<PlaneModel> {
    if n < 3 {
        return Err(Error::DegeneratePlane(format!("need at least 3 points, got {n}")));
    }
    let inv = 1.0 / n as f64;
    let mut centroid = Vector3::zeros();
    for p in points.clone() {
        centroid += Vector3::new(p.x, p.y, p.z);
    }
    centroid *= inv;

    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::new(p.x, p.y, p.z) - centroid;
        cov += d * d.transpose();
    }
    cov *= inv;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let middle = eig.eigenvalues[order[1]];
    let largest = eig.eigenvalues[order[2]];
    if !(largest > 0.0) || middle <= 1e-12 * largest {
        return Err(Error::DegeneratePlane(
            "points are coincident or collinear".into(),
        ));
    }
    let normal = eig.eigenvectors.column(order[0]).into_owned();
    let mut model =
        PlaneModel::from_normal_and_point([normal.x, normal.y, normal.z], centroid.into())?;
    model.inlier_count = n;
    Ok(model)
}

fn plane_through(p0: &Point, p1: &Point, p2: &Point) -> Option<PlaneModel> {
    let v0 = Vector3::new(p0.x, p0.y, p0.z);
    let n = (Vector3::new(p1.x, p1.y, p1.z) - v0).cross(&(Vector3::new(p2.x, p2.y, p2.z) - v0));
    if n.norm() <= 1e-12 {
        return None;
    }
    PlaneModel::from_normal_and_point(n.into(), v0.into()).ok()
}

/// Indices of points within `threshold` of the plane.
pub fn inlier_indices(points: &[Point], plane: &PlaneModel, threshold: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| plane.signed_distance(p.x, p.y, p.z).abs() <= threshold)
        .map(|(i, _)| i)
        .collect()
}

fn count_inliers(points: &[Point], plane: &PlaneModel, threshold: f64) -> usize {
    points
        .iter()
        .filter(|p| plane.signed_distance(p.x, p.y, p.z).abs() <= threshold)
        .count()
}

/// RANSAC over three-point hypotheses, then a least-squares refit on the
/// winning consensus set. The returned `inlier_count` is measured against the
/// refit plane. Hypotheses are drawn sequentially from `params.seed` and
/// scored in parallel; ties go to the lowest hypothesis index.
pub fn fit_plane_ransac(points: &[Point], params: &RansacParams) -> Result<PlaneModel> {
    params.validate()?;
    let n = points.len();
    if n < 3 {
        return Err(Error::DegeneratePlane(format!("need at least 3 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let hypotheses: Vec<[usize; 3]> = (0..params.iterations)
        .map(|_| {
            let idx = index::sample(&mut rng, n, 3);
            [idx.index(0), idx.index(1), idx.index(2)]
        })
        .collect();

    let scores: Vec<Option<(PlaneModel, usize)>> = hypotheses
        .par_iter()
        .map(|&[i, j, k]| {
            let plane = plane_through(&points[i], &points[j], &points[k])?;
            Some((plane, count_inliers(points, &plane, params.inlier_threshold)))
        })
        .collect();

    let mut best: Option<(PlaneModel, usize)> = None;
    for (plane, count) in scores.into_iter().flatten() {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((plane, count));
        }
    }

    let required = (params.min_inlier_fraction * n as f64).ceil() as usize;
    let (plane, count) = match best {
        Some(b) => b,
        None => return Err(Error::NoPlaneFound { inliers: 0, required }),
    };
    if count < required.max(3) {
        return Err(Error::NoPlaneFound {
            inliers: count,
            required,
        });
    }

    let consensus = inlier_indices(points, &plane, params.inlier_threshold);
    let mut refit = fit_plane_lsq_iter(consensus.iter().map(|&i| &points[i]), consensus.len())?;
    refit.inlier_count = count_inliers(points, &refit, params.inlier_threshold);
    Ok(refit)
}

/// Ground estimate for a lidar sample: only points below the sensor (z < 0)
/// take part, and the fixed default plane is used when no consensus is found.
pub fn estimate_ground(points: &[Point], params: &RansacParams) -> Result<PlaneModel> {
    params.validate()?;
    let below: Vec<Point> = points.iter().filter(|p| p.z < 0.0).copied().collect();
    match fit_plane_ransac(&below, params) {
        Ok(plane) => Ok(plane),
        Err(Error::NoPlaneFound { .. } | Error::DegeneratePlane(_) | Error::VerticalPlane(_)) => {
            Ok(PlaneModel::default_ground())
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn flat(n: usize, z: f64, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point::new(
                    rng.random_range(-40.0..40.0),
                    rng.random_range(-40.0..40.0),
                    z,
                    0.0,
                    0.0,
                )
            })
            .collect()
    }

    #[test]
    fn lsq_exact_plane() {
        let m = fit_plane_lsq(&flat(500, -1.82, 1)).unwrap();
        assert_abs_diff_eq!(m.a, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m.b, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m.c, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m.d, 1.82, epsilon = 1e-9);
        assert!(m.is_valid());
    }

    #[test]
    fn lsq_vertical_plane_is_rejected() {
        let pts: Vec<Point> = flat(100, 0.0, 2)
            .into_iter()
            .map(|p| Point::new(0.0, p.x, p.y, 0.0, 0.0))
            .collect();
        assert!(matches!(fit_plane_lsq(&pts), Err(Error::VerticalPlane(_))));
    }

    #[test]
    fn lsq_degenerate_inputs() {
        let two = flat(2, 0.0, 3);
        assert!(matches!(fit_plane_lsq(&two), Err(Error::DegeneratePlane(_))));
        let line: Vec<Point> = (0..10).map(|i| Point::new(i as f64, 2.0 * i as f64, -1.0, 0.0, 0.0)).collect();
        assert!(matches!(fit_plane_lsq(&line), Err(Error::DegeneratePlane(_))));
        let same = vec![Point::new(1.0, 1.0, 1.0, 0.0, 0.0); 5];
        assert!(matches!(fit_plane_lsq(&same), Err(Error::DegeneratePlane(_))));
    }

    #[test]
    fn lsq_noisy_plane_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let pts: Vec<Point> = flat(10_000, -1.8, 5)
            .into_iter()
            .map(|p| Point::new(p.x, p.y, p.z + noise.sample(&mut rng), 0.0, 0.0))
            .collect();
        let m = fit_plane_lsq(&pts).unwrap();
        assert!(m.normal_angle_to([0.0, 0.0, 1.0]).to_degrees() < 0.5);
        assert!((m.d - 1.8).abs() < 0.01);
    }

    fn outlier_scene(seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).unwrap();
        (0..5000)
            .map(|i| {
                let x = rng.random_range(-50.4..50.4);
                let y = rng.random_range(-51.2..51.2);
                if i % 10 < 7 {
                    Point::new(x, y, -1.8 + noise.sample(&mut rng), 0.0, 0.0)
                } else {
                    Point::new(x, y, rng.random_range(-5.0..3.0), 0.0, 0.0)
                }
            })
            .collect()
    }

    #[test]
    fn ransac_recovers_plane_with_outliers() {
        let pts = outlier_scene(9);
        let m = fit_plane_ransac(&pts, &RansacParams::default().with_seed(1)).unwrap();
        assert!(m.normal_angle_to([0.0, 0.0, 1.0]).to_degrees() < 1.0);
        assert!((m.d - 1.8).abs() < 0.02);
        let reported = inlier_indices(&pts, &m, 0.1);
        assert_eq!(reported.len(), m.inlier_count);
        assert!(reported
            .iter()
            .all(|&i| m.signed_distance(pts[i].x, pts[i].y, pts[i].z).abs() <= 0.1));
    }

    #[test]
    fn ransac_all_inliers_equals_lsq() {
        let pts = flat(300, -1.7, 6);
        let r = fit_plane_ransac(&pts, &RansacParams::default()).unwrap();
        let l = fit_plane_lsq(&pts).unwrap();
        for (a, b) in r.coefficients().iter().zip(l.coefficients()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        assert_eq!(r.inlier_count, 300);
    }

    #[test]
    fn ransac_three_points() {
        let pts = vec![
            Point::new(0.0, 0.0, -1.0, 0.0, 0.0),
            Point::new(1.0, 0.0, -1.1, 0.0, 0.0),
            Point::new(0.0, 1.0, -0.9, 0.0, 0.0),
        ];
        let m = fit_plane_ransac(&pts, &RansacParams::default()).unwrap();
        assert_eq!(m.inlier_count, 3);
        for p in &pts {
            assert_abs_diff_eq!(m.signed_distance(p.x, p.y, p.z), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ransac_is_deterministic_and_reports_failure() {
        let pts = outlier_scene(10);
        let p = RansacParams::default().with_seed(77);
        assert_eq!(fit_plane_ransac(&pts, &p).unwrap(), fit_plane_ransac(&pts, &p).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud: Vec<Point> = (0..500)
            .map(|_| {
                Point::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-5.0..3.0),
                    0.0,
                    0.0,
                )
            })
            .collect();
        assert!(matches!(
            fit_plane_ransac(&cloud, &p),
            Err(Error::NoPlaneFound { .. })
        ));
        assert_eq!(estimate_ground(&cloud, &p).unwrap(), PlaneModel::default_ground());
    }

    #[test]
    fn estimate_ground_ignores_points_above_sensor() {
        let mut pts = flat(2000, -1.75, 12);
        // a dense wall of returns above the sensor would otherwise dominate
        pts.extend(flat(6000, 1.5, 13));
        let m = estimate_ground(&pts, &RansacParams::default()).unwrap();
        assert_abs_diff_eq!(m.d, 1.75, epsilon = 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn lsq_translation_invariance(seed in 0u64..1000, tx in -30.0f64..30.0, ty in -30.0f64..30.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts: Vec<Point> = (0..200).map(|_| {
                    let x = rng.random_range(-20.0..20.0);
                    let y = rng.random_range(-20.0..20.0);
                    Point::new(x, y, -1.8 + 0.01 * x - 0.02 * y + rng.random_range(-0.05..0.05), 0.0, 0.0)
                }).collect();
                let moved: Vec<Point> = pts.iter().map(|p| Point::new(p.x + tx, p.y + ty, p.z, 0.0, 0.0)).collect();
                let m0 = fit_plane_lsq(&pts).unwrap();
                let m1 = fit_plane_lsq(&moved).unwrap();
                prop_assert!((m0.a - m1.a).abs() <= 1e-9);
                prop_assert!((m0.b - m1.b).abs() <= 1e-9);
                prop_assert!((m0.c - m1.c).abs() <= 1e-9);
                prop_assert!((m1.d - (m0.d - (m0.a * tx + m0.b * ty))).abs() <= 1e-9);
            }
        }
    }
}
