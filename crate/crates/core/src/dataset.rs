//! On-disk sample format, sweep accumulation, dataset indexing, and a
//! seeded synthetic scene generator.
//!
//! A dataset root holds one `<sample_id>.bin` point file and one
//! `<sample_id>.json` label file per sample. Point files are headerless
//! little-endian `f32` records of (x, y, z, intensity, dt).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PointRange;
use crate::error::{Error, Result};
use crate::geometry::bev_iou;
use crate::ground::PlaneModel;
use crate::model::{
    Attribute, Box3D, ClassCatalog, ClassId, PerClass, Point, MAX_TIME_LAG, NUM_CLASSES,
};

/// Bytes per point record on disk.
pub const POINT_RECORD_BYTES: usize = 20;

/// Most history sweeps accumulated onto one keyframe.
pub const MAX_HISTORY_SWEEPS: usize = 9;

const TIME_EPS: f64 = 1e-9;

/// Accumulated multi-sweep point cloud with its ground-truth labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudSample {
    pub sample_id: String,
    pub points: Vec<Point>,
    pub labels: Vec<Box3D>,
}

/// One lidar rotation. `pose` maps sweep coordinates into the keyframe frame.
#[derive(Debug, Clone)]
pub struct Sweep {
    /// (x, y, z, intensity)
    pub points: Vec<[f64; 4]>,
    pub timestamp: f64,
    pub pose: Isometry3<f64>,
}

impl Sweep {
    pub fn new(points: Vec<[f64; 4]>, timestamp: f64) -> Self {
        Self {
            points,
            timestamp,
            pose: Isometry3::identity(),
        }
    }

    pub fn with_pose(mut self, pose: Isometry3<f64>) -> Self {
        self.pose = pose;
        self
    }
}

/// Merge a keyframe and up to nine preceding sweeps into one cloud, tagging
/// every point with its time lag behind the keyframe.
pub fn accumulate_sweeps(
    sample_id: impl Into<String>,
    keyframe: &Sweep,
    history: &[Sweep],
) -> Result<PointCloudSample> {
    if history.len() > MAX_HISTORY_SWEEPS {
        return Err(Error::TooManySweeps(history.len()));
    }
    let mut lags = Vec::with_capacity(history.len());
    for sweep in history {
        let lag = keyframe.timestamp - sweep.timestamp;
        if !(lag >= 0.0 && lag <= MAX_TIME_LAG + TIME_EPS) {
            return Err(Error::SweepOrdering {
                keyframe: keyframe.timestamp,
                sweep: sweep.timestamp,
            });
        }
        lags.push(lag.min(MAX_TIME_LAG));
    }

    let total = keyframe.points.len() + history.iter().map(|s| s.points.len()).sum::<usize>();
    let mut points = Vec::with_capacity(total);
    let sweeps = std::iter::once((keyframe, 0.0)).chain(history.iter().zip(lags));
    for (sweep, dt) in sweeps {
        points.extend(sweep.points.iter().map(|&[x, y, z, intensity]| {
            let p = sweep.pose.transform_point(&Point3::new(x, y, z));
            Point::new(p.x, p.y, p.z, intensity, dt)
        }));
    }
    Ok(PointCloudSample {
        sample_id: sample_id.into(),
        points,
        labels: Vec::new(),
    })
}

pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % POINT_RECORD_BYTES != 0 {
        return Err(Error::corrupt(
            path,
            format!(
                "point file length {} is not a multiple of {POINT_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    Ok(decode_points(&bytes))
}

pub fn decode_points(bytes: &[u8]) -> Vec<Point> {
    bytes
        .chunks_exact(POINT_RECORD_BYTES)
        .map(|rec| {
            let f = |i: usize| {
                f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4-byte slice")) as f64
            };
            Point::new(f(0), f(1), f(2), f(3), f(4))
        })
        .collect()
}

pub fn encode_points(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * POINT_RECORD_BYTES);
    for p in points {
        for v in p.to_array() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_points(path: &Path, points: &[Point]) -> Result<()> {
    fs::write(path, encode_points(points)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelFile {
    sample_id: String,
    boxes: Vec<Box3D>,
}

pub fn read_labels(path: &Path) -> Result<(String, Vec<Box3D>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: LabelFile =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))?;
    for b in &file.boxes {
        b.validate().map_err(|e| Error::corrupt(path, e.to_string()))?;
    }
    Ok((file.sample_id, file.boxes))
}

pub fn write_labels(path: &Path, sample_id: &str, boxes: &[Box3D]) -> Result<()> {
    let file = LabelFile {
        sample_id: sample_id.to_owned(),
        boxes: boxes.to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).expect("labels serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `<dir>/<sample_id>.bin` and `<dir>/<sample_id>.json`.
pub fn write_sample(dir: &Path, sample: &PointCloudSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_points(&dir.join(format!("{}.bin", sample.sample_id)), &sample.points)?;
    write_labels(
        &dir.join(format!("{}.json", sample.sample_id)),
        &sample.sample_id,
        &sample.labels,
    )
}

pub fn read_sample(points_path: &Path, labels_path: &Path) -> Result<PointCloudSample> {
    let points = read_points(points_path)?;
    let (sample_id, labels) = read_labels(labels_path)?;
    Ok(PointCloudSample {
        sample_id,
        points,
        labels,
    })
}

pub fn class_counts(labels: &[Box3D]) -> PerClass<usize> {
    let mut counts = [0; NUM_CLASSES];
    for b in labels {
        counts[b.class.index()] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub sample_id: String,
    pub points: PathBuf,
    pub labels: PathBuf,
    /// Instance count per class.
    pub counts: PerClass<usize>,
}

impl IndexEntry {
    pub fn contains(&self, class: ClassId) -> bool {
        self.counts[class.index()] > 0
    }

    pub fn load(&self) -> Result<PointCloudSample> {
        read_sample(&self.points, &self.labels)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    sample_id: String,
    points: PathBuf,
    labels: PathBuf,
    counts: BTreeMap<ClassId, usize>,
}

/// Manifest of samples with per-class presence and instance counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetIndex {
    entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate sample id `{}` in index",
                    e.sample_id
                )));
            }
        }
        Ok(Self { entries })
    }

    /// In-memory index from per-sample class counts (no backing files).
    pub fn from_counts(counts: impl IntoIterator<Item = (String, PerClass<usize>)>) -> Result<Self> {
        Self::new(
            counts
                .into_iter()
                .map(|(sample_id, counts)| IndexEntry {
                    points: PathBuf::from(format!("{sample_id}.bin")),
                    labels: PathBuf::from(format!("{sample_id}.json")),
                    sample_id,
                    counts,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.sample_id == sample_id)
    }

    /// Number of samples containing each class.
    pub fn sample_counts(&self) -> PerClass<usize> {
        let mut out = [0; NUM_CLASSES];
        for e in &self.entries {
            for c in ClassId::ALL {
                out[c.index()] += e.contains(c) as usize;
            }
        }
        out
    }

    /// Number of instances of each class.
    pub fn instance_counts(&self) -> PerClass<usize> {
        let mut out = [0; NUM_CLASSES];
        for e in &self.entries {
            for (o, n) in out.iter_mut().zip(e.counts) {
                *o += n;
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let rec = IndexRecord {
                sample_id: e.sample_id.clone(),
                points: e.points.clone(),
                labels: e.labels.clone(),
                counts: ClassId::ALL
                    .into_iter()
                    .filter(|c| e.contains(*c))
                    .map(|c| (c, e.counts[c.index()]))
                    .collect(),
            };
            let line = serde_json::to_string(&rec).expect("index record serializes");
            writeln!(w, "{line}").map_err(|err| Error::io(path, err))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: IndexRecord = serde_json::from_str(&line)
                .map_err(|e| Error::corrupt(path, format!("line {}: {e}", lineno + 1)))?;
            let mut counts = [0; NUM_CLASSES];
            for (c, n) in rec.counts {
                counts[c.index()] = n;
            }
            entries.push(IndexEntry {
                sample_id: rec.sample_id,
                points: rec.points,
                labels: rec.labels,
                counts,
            });
        }
        Self::new(entries)
    }
}

/// Scan `root` for `<id>.json` label files with matching `<id>.bin` point files.
/// Entries are sorted by sample id.
pub fn build_index(root: &Path) -> Result<DatasetIndex> {
    let mut label_files = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.extension().is_some_and(|x| x == "json") && path.is_file() {
            label_files.push(path);
        }
    }
    label_files.sort();

    let entries = label_files
        .par_iter()
        .map(|labels| {
            let points = labels.with_extension("bin");
            let meta = fs::metadata(&points).map_err(|e| Error::io(&points, e))?;
            if meta.len() as usize % POINT_RECORD_BYTES != 0 {
                return Err(Error::corrupt(
                    &points,
                    format!("point file length {} is not a multiple of {POINT_RECORD_BYTES}", meta.len()),
                ));
            }
            let (sample_id, boxes) = read_labels(labels)?;
            Ok(IndexEntry {
                sample_id,
                points,
                labels: labels.clone(),
                counts: class_counts(&boxes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetIndex::new(entries)
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub range: PointRange,
    pub catalog: ClassCatalog,
    pub ground_points: usize,
    pub points_per_box: usize,
    /// Ground height below the sensor at the origin, meters.
    pub ground_depth: f64,
    /// Largest ground tilt, degrees.
    pub max_tilt_deg: f64,
    pub ground_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            range: PointRange::default(),
            catalog: ClassCatalog::default(),
            ground_points: 20_000,
            points_per_box: 64,
            ground_depth: 1.82,
            max_tilt_deg: 0.5,
            ground_noise: 0.01,
        }
    }
}

/// A generated scene together with the plane its ground and boxes sit on.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub sample: PointCloudSample,
    pub plane: PlaneModel,
}

/// Generate a scene with the default [`SynthConfig`].
pub fn synth_scene(seed: u64, counts: &PerClass<usize>) -> PointCloudSample {
    SynthConfig::default().generate(seed, counts).sample
}

const PLACEMENT_TRIES: usize = 10_000;

/// Write `n_samples` synthetic samples into `dir`, each with between 0 and
/// `max_per_class` boxes of every class. Returns the sample ids in order.
pub fn write_synth_dataset(
    cfg: &SynthConfig,
    dir: &Path,
    n_samples: usize,
    max_per_class: usize,
    seed: u64,
) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<(u64, PerClass<usize>)> = (0..n_samples)
        .map(|_| {
            let counts = std::array::from_fn(|_| rng.random_range(0..=max_per_class));
            (rng.random::<u64>(), counts)
        })
        .collect();
    plans
        .par_iter()
        .enumerate()
        .map(|(i, (scene_seed, counts))| {
            let mut sample = cfg.generate(*scene_seed, counts).sample;
            sample.sample_id = format!("synth_{i:05}");
            write_sample(dir, &sample)?;
            Ok(sample.sample_id)
        })
        .collect()
}

impl SynthConfig {
    /// Deterministic in `seed`. Boxes sit bottom-down on a slightly tilted
    /// ground plane, never overlap in BEV, and carry surface points just
    /// inside their faces. A box that cannot be placed after many tries is
    /// skipped.
    pub fn generate(&self, seed: u64, counts: &PerClass<usize>) -> SynthScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = self.range.min;
        let hi = self.range.max;

        let tilt = self.max_tilt_deg.to_radians();
        let ax = rng.random_range(-tilt..=tilt);
        let ay = rng.random_range(-tilt..=tilt);
        let plane = PlaneModel::from_normal_and_point(
            [ax.sin(), ay.sin(), 1.0],
            [0.0, 0.0, -self.ground_depth],
        )
        .expect("near-horizontal plane");

        let noise = Normal::new(0.0, self.ground_noise.max(0.0)).expect("finite sigma");
        let dt = |rng: &mut ChaCha8Rng| rng.random_range(0..10) as f64 * 0.05;

        let mut points = Vec::with_capacity(
            self.ground_points + self.points_per_box * counts.iter().sum::<usize>(),
        );
        for _ in 0..self.ground_points {
            let x = rng.random_range(lo[0]..hi[0]);
            let y = rng.random_range(lo[1]..hi[1]);
            let z = plane.height_at(x, y) + noise.sample(&mut rng);
            let intensity = rng.random_range(0.0..1.0);
            let lag = dt(&mut rng);
            points.push(Point::new(x, y, z, intensity, lag));
        }

        let mut labels: Vec<Box3D> = Vec::new();
        for class in ClassId::ALL {
            let info = self.catalog.info(class);
            for _ in 0..counts[class.index()] {
                let size = info.anchor_size.map(|s| s * rng.random_range(0.9..1.1));
                let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let r = 0.5 * size[0].hypot(size[1]);
                let (x_lo, x_hi) = (lo[0] + r, hi[0] - r);
                let (y_lo, y_hi) = (lo[1] + r, hi[1] - r);
                if x_lo >= x_hi || y_lo >= y_hi {
                    continue;
                }
                let mut placed = None;
                for _ in 0..PLACEMENT_TRIES {
                    let cx = rng.random_range(x_lo..x_hi);
                    let cy = rng.random_range(y_lo..y_hi);
                    let cz = plane.height_at(cx, cy) + 0.5 * size[2];
                    let candidate = Box3D::new(class, [cx, cy, cz], size, yaw);
                    if labels.iter().all(|b| bev_iou(b, &candidate) == 0.0) {
                        placed = Some(candidate);
                        break;
                    }
                }
                let Some(mut b) = placed else { continue };

                let speed = match class {
                    ClassId::Barrier | ClassId::TrafficCone => 0.0,
                    _ => rng.random_range(0.0..3.0),
                };
                let (s, c) = b.yaw.sin_cos();
                b = b.with_velocity(speed * c, speed * s);
                b.attribute = match info.default_attribute {
                    Some(Attribute::CycleWithoutRider) if speed > 1.0 => Some(Attribute::CycleWithRider),
                    other => other,
                };

                for _ in 0..self.points_per_box {
                    let mut local = [
                        rng.random_range(-0.49..0.49),
                        rng.random_range(-0.49..0.49),
                        rng.random_range(-0.49..0.49),
                    ];
                    let face = rng.random_range(0..6);
                    local[face / 2] = if face % 2 == 0 { 0.49 } else { -0.49 };
                    let [wx, wy, wz] =
                        b.to_world(local[0] * b.l, local[1] * b.w, local[2] * b.h);
                    let intensity = rng.random_range(0.0..1.0);
                    let lag = dt(&mut rng);
                    points.push(Point::new(wx, wy, wz, intensity, lag));
                }
                labels.push(b);
            }
        }

        SynthScene {
            sample: PointCloudSample {
                sample_id: format!("synth_{seed}"),
                points,
                labels,
            },
            plane,
        }
    }
}
