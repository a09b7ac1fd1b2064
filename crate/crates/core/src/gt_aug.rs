//! Ground-truth database and copy-paste augmentation onto the ground plane.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PointRange;
use crate::dataset::{read_points, write_points, DatasetIndex, PointCloudSample};
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, point_in_box, point_in_box_bev};
use crate::ground::PlaneModel;
use crate::model::{Box3D, ClassId, PerClass, Point, NUM_CLASSES};

/// Pasted points are kept this fraction inside the box faces so the
/// local-to-world round trip cannot push them outside.
const FACE_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GtAugConfig {
    /// Boxes with fewer points inside are not added to the database.
    pub min_points: usize,
    /// Placement attempts per requested instance.
    pub retries: usize,
    /// Instances pasted per class and scene.
    pub magnitudes: BTreeMap<ClassId, usize>,
}

impl Default for GtAugConfig {
    fn default() -> Self {
        use ClassId::*;
        Self {
            min_points: 5,
            retries: 10,
            magnitudes: BTreeMap::from([
                (Car, 2),
                (Truck, 3),
                (Bus, 7),
                (Trailer, 4),
                (ConstructionVehicle, 6),
                (TrafficCone, 2),
                (Barrier, 6),
                (Bicycle, 6),
                (Motorcycle, 2),
                (Pedestrian, 2),
            ]),
        }
    }
}

impl GtAugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_points == 0 {
            return Err(Error::InvalidConfig("gt_aug.min_points must be at least 1".into()));
        }
        if self.retries == 0 {
            return Err(Error::InvalidConfig("gt_aug.retries must be at least 1".into()));
        }
        Ok(())
    }

    /// Magnitudes indexed like `ClassId::ALL`; unlisted classes get 0.
    pub fn magnitude_array(&self) -> PerClass<usize> {
        let mut out = [0; NUM_CLASSES];
        for (c, n) in &self.magnitudes {
            out[c.index()] = *n;
        }
        out
    }

    pub fn with_magnitudes(mut self, mags: PerClass<usize>) -> Self {
        self.magnitudes = ClassId::ALL.into_iter().map(|c| (c, mags[c.index()])).collect();
        self
    }
}

/// A ground-truth object with its points in the box frame (centered, yaw removed).
#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub bbox: Box3D,
    pub points: Vec<Point>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtDatabase {
    entries: PerClass<Vec<DbEntry>>,
}

fn crop(sample: &PointCloudSample, min_points: usize) -> Vec<DbEntry> {
    sample
        .labels
        .iter()
        .filter_map(|b| {
            let points: Vec<Point> = sample
                .points
                .iter()
                .filter(|p| point_in_box(p, b))
                .map(|p| {
                    let [x, y, z] = b.to_local(p.x, p.y, p.z);
                    Point::new(x, y, z, p.intensity, p.dt)
                })
                .collect();
            (points.len() >= min_points).then(|| DbEntry {
                bbox: *b,
                points,
                source: sample.sample_id.clone(),
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    #[serde(flatten)]
    bbox: Box3D,
    source: String,
    file: String,
    num_points: usize,
}

impl GtDatabase {
    pub fn from_samples(samples: &[PointCloudSample], min_points: usize) -> Self {
        let crops: Vec<Vec<DbEntry>> = samples.par_iter().map(|s| crop(s, min_points)).collect();
        let mut db = Self::default();
        for e in crops.into_iter().flatten() {
            db.entries[e.bbox.class.index()].push(e);
        }
        db
    }

    pub fn entries(&self, class: ClassId) -> &[DbEntry] {
        &self.entries[class.index()]
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> PerClass<usize> {
        let mut out = [0; NUM_CLASSES];
        for (o, e) in out.iter_mut().zip(&self.entries) {
            *o = e.len();
        }
        out
    }

    /// Write `manifest.json` plus one point file per entry into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Vec::with_capacity(self.len());
        for class in ClassId::ALL {
            for (i, e) in self.entries(class).iter().enumerate() {
                let file = format!("{}_{i:06}.bin", class.name());
                write_points(&dir.join(&file), &e.points)?;
                manifest.push(ManifestEntry {
                    bbox: e.bbox,
                    source: e.source.clone(),
                    file,
                    num_points: e.points.len(),
                });
            }
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        let loaded: Vec<DbEntry> = manifest
            .into_par_iter()
            .map(|m| {
                let file = dir.join(&m.file);
                let points = read_points(&file)?;
                if points.len() != m.num_points {
                    return Err(Error::corrupt(
                        &file,
                        format!("expected {} points, found {}", m.num_points, points.len()),
                    ));
                }
                Ok(DbEntry {
                    bbox: m.bbox,
                    points,
                    source: m.source,
                })
            })
            .collect::<Result<_>>()?;
        let mut db = Self::default();
        for e in loaded {
            db.entries[e.bbox.class.index()].push(e);
        }
        Ok(db)
    }
}

/// Crop every labelled box of every indexed sample, keeping boxes with at
/// least `min_points` points.
pub fn build_gt_database(index: &DatasetIndex, min_points: usize) -> Result<GtDatabase> {
    if min_points == 0 {
        return Err(Error::InvalidArgument("min_points must be at least 1".into()));
    }
    let crops: Vec<Vec<DbEntry>> = index
        .entries()
        .par_iter()
        .map(|e| {
            // load errors carry the sample's file path
            Ok(crop(&e.load()?, min_points))
        })
        .collect::<Result<_>>()?;
    let mut db = GtDatabase::default();
    for e in crops.into_iter().flatten() {
        db.entries[e.bbox.class.index()].push(e);
    }
    Ok(db)
}

/// Result of pasting database objects into a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub sample: PointCloudSample,
    /// Number of pasted boxes; they are the last entries of `sample.labels`.
    pub placed: usize,
}

/// Paste up to `magnitudes[c]` database objects of each class into `sample`.
///
/// Each pasted box gets a uniform yaw and a uniform center in `range` shrunk
/// by its BEV circumradius, with its bottom face center on `plane`. A
/// candidate overlapping any existing or already pasted box in BEV is
/// redrawn, up to `retries` times. Scene points under a pasted box's BEV
/// rectangle are removed before the object's points are added.
pub fn place_samples(
    sample: &PointCloudSample,
    db: &GtDatabase,
    plane: &PlaneModel,
    cfg: &GtAugConfig,
    range: &PointRange,
    seed: u64,
) -> Result<Augmented> {
    if !plane.is_valid() {
        return Err(Error::DegeneratePlane(format!("invalid plane {:?}", plane.coefficients())));
    }
    cfg.validate()?;
    let mags = cfg.magnitude_array();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = sample.labels.clone();
    let mut pasted: Vec<(Box3D, &DbEntry)> = Vec::new();

    for class in ClassId::ALL {
        let pool = db.entries(class);
        if pool.is_empty() {
            continue;
        }
        for _ in 0..mags[class.index()] {
            let entry = &pool[rng.random_range(0..pool.len())];
            let src = entry.bbox;
            let r = src.bev_circumradius();
            let (x_lo, x_hi) = (range.min[0] + r, range.max[0] - r);
            let (y_lo, y_hi) = (range.min[1] + r, range.max[1] - r);
            if x_lo >= x_hi || y_lo >= y_hi {
                continue;
            }
            for _ in 0..cfg.retries {
                // uniform on (-pi, pi]
                let yaw = PI - rng.random_range(0.0..2.0 * PI);
                let cx = rng.random_range(x_lo..x_hi);
                let cy = rng.random_range(y_lo..y_hi);
                let cz = plane.height_at(cx, cy) + 0.5 * src.h;
                let (s, c) = (yaw - src.yaw).sin_cos();
                let candidate = Box3D {
                    cx,
                    cy,
                    cz,
                    yaw,
                    vx: c * src.vx - s * src.vy,
                    vy: s * src.vx + c * src.vy,
                    ..src
                };
                if labels.iter().all(|b| bev_iou(b, &candidate) == 0.0) {
                    labels.push(candidate);
                    pasted.push((candidate, entry));
                    break;
                }
            }
        }
    }

    if pasted.is_empty() {
        return Ok(Augmented {
            sample: sample.clone(),
            placed: 0,
        });
    }

    let mut points: Vec<Point> = sample
        .points
        .iter()
        .filter(|p| !pasted.iter().any(|(b, _)| point_in_box_bev(p.x, p.y, b)))
        .copied()
        .collect();
    for (b, entry) in &pasted {
        let half = [b.l, b.w, b.h].map(|s| 0.5 * s * (1.0 - FACE_MARGIN));
        for p in &entry.points {
            let local = [p.x, p.y, p.z];
            let l = [0, 1, 2].map(|i| local[i].clamp(-half[i], half[i]));
            let [x, y, z] = b.to_world(l[0], l[1], l[2]);
            points.push(Point::new(x, y, z, p.intensity, p.dt));
        }
    }

    Ok(Augmented {
        sample: PointCloudSample {
            sample_id: sample.sample_id.clone(),
            points,
            labels,
        },
        placed: pasted.len(),
    })
}
