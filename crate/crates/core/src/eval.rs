//! Center-distance detection metrics: per-class AP at several distance
//! thresholds, the five true-positive errors, and the combined NDS score.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{wrap_to_pi, Box3D, ClassId, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TpMetric {
    Trans,
    Scale,
    Orient,
    Vel,
    Attr,
}

impl TpMetric {
    pub const ALL: [TpMetric; 5] = [
        TpMetric::Trans,
        TpMetric::Scale,
        TpMetric::Orient,
        TpMetric::Vel,
        TpMetric::Attr,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// BEV center-distance thresholds (m) that AP is averaged over.
    pub dist_thresholds: Vec<f64>,
    /// Threshold whose matches feed the TP errors.
    pub tp_threshold: f64,
    pub min_recall: f64,
    pub min_precision: f64,
    /// Classes left out of the mean of each TP metric.
    pub tp_exclusions: BTreeMap<TpMetric, Vec<ClassId>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dist_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            min_recall: 0.1,
            min_precision: 0.1,
            tp_exclusions: BTreeMap::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dist_thresholds.is_empty() || self.dist_thresholds.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidConfig("distance thresholds must be positive".into()));
        }
        if !(self.tp_threshold > 0.0 && self.tp_threshold.is_finite()) {
            return Err(Error::InvalidConfig("tp_threshold must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.min_recall) || !(0.0..1.0).contains(&self.min_precision) {
            return Err(Error::InvalidConfig("min_recall and min_precision must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn excluded(&self, metric: TpMetric, class: ClassId) -> bool {
        self.tp_exclusions.get(&metric).is_some_and(|v| v.contains(&class))
    }
}

/// The five TP errors: translation (m), scale (1 - IoU), orientation (rad),
/// velocity (m/s), attribute (1 - accuracy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
        aae: 1.0,
    };

    pub fn to_array(self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }

    fn get(&self, m: TpMetric) -> f64 {
        self.to_array()[m as usize]
    }
}

/// `(5 * mAP + sum(1 - min(1, err))) / 10`.
pub fn nds(map: f64, errors: &TpErrors) -> f64 {
    let tp: f64 = errors.to_array().iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 10.0
}

/// Greedily match score-sorted detections of one sample and class to the
/// nearest unmatched ground truth within `threshold` (BEV center distance).
/// Returns the matched gt index per detection.
pub fn match_detections(dets: &[Box3D], gts: &[Box3D], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let best = nearest_free(d, gts, &taken, threshold);
            if let Some(j) = best {
                taken[j] = true;
            }
            best
        })
        .collect()
}

fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

fn nearest_free(d: &Box3D, gts: &[Box3D], taken: &[bool], threshold: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        if taken[j] || g.class != d.class {
            continue;
        }
        let dist = center_distance(d, g);
        if dist <= threshold && best.is_none_or(|(_, b)| dist < b) {
            best = Some((j, dist));
        }
    }
    best.map(|(j, _)| j)
}

/// `numpy.interp(x, xp, fp, right=0)` for nondecreasing `xp`.
fn interp(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    let last = xp.len() - 1;
    if x > xp[last] {
        return 0.0;
    }
    if x < xp[0] {
        return fp[0];
    }
    if x == xp[last] {
        return fp[last];
    }
    let j = xp.partition_point(|&v| v <= x) - 1;
    let slope = (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j]);
    slope * (x - xp[j]) + fp[j]
}

/// Precision-recall operating points in descending score order.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Area under the 101-point interpolated PR curve over recall above
/// `min_recall`, with precision shifted down by `min_precision` and
/// renormalized to [0, 1].
pub fn average_precision(curve: &PrCurve, min_recall: f64, min_precision: f64) -> f64 {
    if curve.recall.is_empty() {
        return 0.0;
    }
    let first = (100.0 * min_recall).round() as usize + 1;
    let vals: Vec<f64> = (first..=100)
        .map(|i| {
            let p = interp(i as f64 / 100.0, &curve.recall, &curve.precision);
            (p - min_precision).max(0.0)
        })
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (mean / (1.0 - min_precision)).min(1.0)
}

/// One matched pair: (detection, ground truth).
type Pair = (Box3D, Box3D);

struct ClassMatch {
    curve: PrCurve,
    pairs: Vec<Pair>,
}

/// Match all detections of `class` across samples, highest score first.
fn match_class(
    class: ClassId,
    gts: &BTreeMap<String, Vec<Box3D>>,
    dets: &BTreeMap<String, Vec<Box3D>>,
    threshold: f64,
) -> ClassMatch {
    let npos: usize = gts.values().flatten().filter(|b| b.class == class).count();
    let mut order: Vec<(&str, &Box3D)> = dets
        .iter()
        .flat_map(|(s, v)| v.iter().filter(|b| b.class == class).map(move |b| (s.as_str(), b)))
        .collect();
    // stable: ties keep sample then file order
    order.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let empty: Vec<Box3D> = Vec::new();
    let mut taken: BTreeMap<&str, Vec<bool>> = gts
        .iter()
        .map(|(s, v)| (s.as_str(), vec![false; v.len()]))
        .collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = PrCurve::default();
    let mut pairs = Vec::new();
    for (sample, d) in order {
        let sample_gts = gts.get(sample).unwrap_or(&empty);
        let hit = taken
            .get_mut(sample)
            .and_then(|t| nearest_free(d, sample_gts, t, threshold).inspect(|&j| t[j] = true));
        match hit {
            Some(j) => {
                tp += 1;
                pairs.push((*d, sample_gts[j]));
            }
            None => fp += 1,
        }
        if npos > 0 {
            curve.precision.push(tp as f64 / (tp + fp) as f64);
            curve.recall.push(tp as f64 / npos as f64);
        }
    }
    ClassMatch { curve, pairs }
}

fn aligned_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = a.l.min(b.l) * a.w.min(b.w) * a.h.min(b.h);
    inter / (a.volume() + b.volume() - inter)
}

/// Plain means of the TP errors over matched pairs; all 1 when empty.
pub fn tp_errors(pairs: &[Pair]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&Box3D, &Box3D) -> f64| pairs.iter().map(|(d, g)| f(d, g)).sum::<f64>() / n;
    TpErrors {
        ate: mean(&|d, g| center_distance(d, g)),
        ase: mean(&|d, g| 1.0 - aligned_iou(d, g)),
        aoe: mean(&|d, g| wrap_to_pi(d.yaw - g.yaw).abs()),
        ave: mean(&|d, g| (d.vx - g.vx).hypot(d.vy - g.vy)),
        aae: mean(&|d, g| (d.attribute != g.attribute) as u8 as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub num_gt: usize,
    pub num_det: usize,
    /// AP at each distance threshold.
    pub ap: Vec<f64>,
    pub mean_ap: f64,
    pub tp: TpErrors,
    #[serde(skip)]
    pub curves: Vec<PrCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dist_thresholds: Vec<f64>,
    pub classes: BTreeMap<ClassId, ClassMetrics>,
    pub map: f64,
    pub tp: TpErrors,
    pub nds: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Evaluate detections against ground truth, both keyed by sample id.
/// Classes without ground truth are left out of every mean.
pub fn evaluate(
    gts: &BTreeMap<String, Vec<Box3D>>,
    dets: &BTreeMap<String, Vec<Box3D>>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let per_class: Vec<(ClassId, ClassMetrics)> = ClassId::ALL
        .par_iter()
        .map(|&class| {
            let num_gt = gts.values().flatten().filter(|b| b.class == class).count();
            let num_det = dets.values().flatten().filter(|b| b.class == class).count();
            let mut curves = Vec::new();
            let mut ap = Vec::new();
            for &t in &cfg.dist_thresholds {
                let m = match_class(class, gts, dets, t);
                ap.push(average_precision(&m.curve, cfg.min_recall, cfg.min_precision));
                curves.push(m.curve);
            }
            let tp = tp_errors(&match_class(class, gts, dets, cfg.tp_threshold).pairs);
            let mean_ap = ap.iter().sum::<f64>() / ap.len() as f64;
            (
                class,
                ClassMetrics {
                    num_gt,
                    num_det,
                    ap,
                    mean_ap,
                    tp,
                    curves,
                },
            )
        })
        .collect();

    let present: Vec<&(ClassId, ClassMetrics)> = per_class.iter().filter(|(_, m)| m.num_gt > 0).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|(_, m)| m.mean_ap).sum::<f64>() / present.len() as f64
    };
    let mut mtp = [1.0; 5];
    for (k, metric) in TpMetric::ALL.into_iter().enumerate() {
        let vals: Vec<f64> = present
            .iter()
            .filter(|(c, _)| !cfg.excluded(metric, *c))
            .map(|(_, m)| m.tp.get(metric))
            .collect();
        if !vals.is_empty() {
            mtp[k] = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    let tp = TpErrors {
        ate: mtp[0],
        ase: mtp[1],
        aoe: mtp[2],
        ave: mtp[3],
        aae: mtp[4],
    };
    debug_assert_eq!(per_class.len(), NUM_CLASSES);
    Ok(MetricsReport {
        dist_thresholds: cfg.dist_thresholds.clone(),
        classes: per_class.into_iter().collect(),
        map,
        nds: nds(map, &tp),
        tp,
    })
}
