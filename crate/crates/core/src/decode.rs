//! Per-group decoding of raw head outputs into detections: top-k, score
//! filter, rotated NMS, cap, and attribute assignment.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{decode_box, AnchorSet, BoxCode};
use crate::error::{Error, Result};
use crate::geometry::bev_iou;
use crate::model::{Attribute, Box3D, ClassCatalog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmsConfig {
    /// Proposals kept per group before NMS.
    pub pre_max: usize,
    pub score_threshold: f64,
    /// Boxes with BEV IoU strictly above this are suppressed.
    pub iou_threshold: f64,
    /// Detections kept per group after NMS.
    pub post_max: usize,
    /// Cycles faster than this (m/s) are labelled as ridden.
    pub rider_velocity: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            pre_max: 1000,
            score_threshold: 0.1,
            iou_threshold: 0.2,
            post_max: 80,
            rider_velocity: 1.0,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pre_max == 0 || self.post_max == 0 {
            return Err(Error::InvalidConfig("pre_max and post_max must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::InvalidConfig("NMS thresholds must lie in [0, 1]".into()));
        }
        if !(self.rider_velocity > 0.0 && self.rider_velocity.is_finite()) {
            return Err(Error::InvalidConfig("rider_velocity must be positive".into()));
        }
        Ok(())
    }
}

/// Raw head outputs of one group, one row per anchor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupOutput {
    /// Per-anchor probability for each class of the group.
    pub scores: Vec<Vec<f64>>,
    pub reg: Vec<BoxCode>,
    pub dir: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: Box3D,
    pub group: usize,
    pub anchor: usize,
}

/// Detections per group, each list sorted by descending score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub groups: Vec<Vec<Detection>>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Detection> {
        self.groups.iter().flatten()
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.iter().map(|d| d.bbox).collect()
    }

    /// One JSON object per line, with a `sample_id` field on each record.
    pub fn write_jsonl(&self, path: &Path, sample_id: &str) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_records(&mut w, sample_id, self.iter()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    sample_id: String,
    #[serde(flatten)]
    det: Detection,
}

pub fn write_records<'a, W: Write>(
    w: &mut W,
    sample_id: &str,
    dets: impl IntoIterator<Item = &'a Detection>,
) -> std::io::Result<()> {
    for det in dets {
        let rec = Record {
            sample_id: sample_id.to_owned(),
            det: *det,
        };
        serde_json::to_writer(&mut *w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Read detection records, returning (sample_id, detection) pairs in file order.
pub fn read_detections(path: &Path) -> Result<Vec<(String, Detection)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::corrupt(path, format!("line {}: {e}", n + 1)))?;
        out.push((rec.sample_id, rec.det));
    }
    Ok(out)
}

/// Greedy NMS over candidates already sorted by descending score. Returns the
/// kept positions, at most `max_keep` of them.
pub fn greedy_nms(boxes: &[Box3D], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for i in 0..boxes.len() {
        if keep.len() >= max_keep {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for j in i + 1..boxes.len() {
            if !suppressed[j] && bev_iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

fn decode_group(
    group_index: usize,
    anchors: &crate::anchors::GroupAnchors,
    out: &GroupOutput,
    cfg: &NmsConfig,
    direction_offset: f64,
) -> Result<Vec<Detection>> {
    let n = anchors.len();
    let k = anchors.classes.len();
    if out.scores.len() != n || out.reg.len() != n || out.dir.len() != n {
        return Err(Error::Shape(format!(
            "group {group_index}: outputs ({}, {}, {}) do not match {n} anchors",
            out.scores.len(),
            out.reg.len(),
            out.dir.len()
        )));
    }
    if let Some(i) = out.scores.iter().position(|s| s.len() != k) {
        return Err(Error::Shape(format!(
            "group {group_index}: anchor {i} has {} scores for {k} classes",
            out.scores[i].len()
        )));
    }

    // best class per anchor; first slot wins ties
    let mut cand: Vec<(usize, usize, f64)> = out
        .scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (slot, score) = s
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best });
            (i, slot, score)
        })
        .collect();
    cand.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    cand.truncate(cfg.pre_max);
    cand.retain(|c| c.2 >= cfg.score_threshold);

    let boxes: Vec<Box3D> = cand
        .iter()
        .map(|&(i, slot, score)| {
            let mut anchor = anchors.anchors[i];
            anchor.class = anchors.classes[slot];
            decode_box(&anchor, &out.reg[i], out.dir[i], direction_offset).with_score(score)
        })
        .collect();
    Ok(greedy_nms(&boxes, cfg.iou_threshold, cfg.post_max)
        .into_iter()
        .map(|p| Detection {
            bbox: boxes[p],
            group: group_index,
            anchor: cand[p].0,
        })
        .collect())
}

/// Decode and suppress every group independently. Each anchor keeps its own
/// size; only its class is replaced by the argmax class before decoding.
pub fn decode_and_suppress(
    anchors: &AnchorSet,
    outputs: &[GroupOutput],
    cfg: &NmsConfig,
    direction_offset: f64,
) -> Result<DetectionSet> {
    if outputs.len() != anchors.groups.len() {
        return Err(Error::Shape(format!(
            "{} output groups for {} anchor groups",
            outputs.len(),
            anchors.groups.len()
        )));
    }
    let groups = anchors
        .groups
        .par_iter()
        .zip(outputs)
        .enumerate()
        .map(|(g, (a, o))| decode_group(g, a, o, cfg, direction_offset))
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionSet { groups })
}

/// Give every detection its class's default attribute, then mark bicycles and
/// motorcycles moving faster than `rider_velocity` as ridden.
pub fn assign_attributes(dets: &mut DetectionSet, catalog: &ClassCatalog, rider_velocity: f64) {
    for d in dets.groups.iter_mut().flatten() {
        let b = &mut d.bbox;
        b.attribute = if b.class.is_cycle() && b.speed() > rider_velocity {
            Some(Attribute::CycleWithRider)
        } else {
            catalog.default_attribute(b.class)
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{direction_target, encode_box, GroupAnchors, CODE_SIZE};
    use crate::model::ClassId;
    use std::f64::consts::FRAC_PI_4;

    fn single_group(anchors: Vec<Box3D>) -> AnchorSet {
        AnchorSet {
            groups: vec![GroupAnchors {
                classes: vec![ClassId::Car],
                anchors,
                grid: [0, 0],
            }],
        }
    }

    fn car_at(x: f64, y: f64) -> Box3D {
        Box3D::new(ClassId::Car, [x, y, -1.0], [4.0, 2.0, 1.5], 0.0)
    }

    fn identity_output(anchors: &[Box3D], scores: &[f64]) -> GroupOutput {
        GroupOutput {
            scores: scores.iter().map(|&s| vec![s]).collect(),
            reg: vec![[0.0; CODE_SIZE]; anchors.len()],
            dir: anchors.iter().map(|a| direction_target(a.yaw, FRAC_PI_4)).collect(),
        }
    }

    #[test]
    fn identical_boxes_keep_higher_score() {
        let a = vec![car_at(0.0, 0.0), car_at(0.0, 0.0)];
        let set = single_group(a.clone());
        let dets = decode_and_suppress(&set, &[identity_output(&a, &[0.8, 0.9])], &NmsConfig::default(), FRAC_PI_4)
            .unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets.groups[0][0].bbox.score, 0.9);
        assert_eq!(dets.groups[0][0].anchor, 1);
    }

    #[test]
    fn disjoint_boxes_both_kept() {
        let a = vec![car_at(0.0, 0.0), car_at(20.0, 0.0)];
        let set = single_group(a.clone());
        let dets = decode_and_suppress(&set, &[identity_output(&a, &[0.5, 0.6])], &NmsConfig::default(), FRAC_PI_4)
            .unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets.groups[0][0].bbox.score, 0.6);
    }

    #[test]
    fn cap_at_eighty() {
        let a: Vec<Box3D> = (0..200).map(|i| car_at((i % 20) as f64 * 5.0, (i / 20) as f64 * 3.0)).collect();
        let set = single_group(a.clone());
        let dets = decode_and_suppress(&set, &[identity_output(&a, &[0.5; 200])], &NmsConfig::default(), FRAC_PI_4)
            .unwrap();
        assert_eq!(dets.len(), 80);
        // equal scores: lowest anchor indices win
        let idx: Vec<usize> = dets.groups[0].iter().map(|d| d.anchor).collect();
        assert_eq!(idx, (0..80).collect::<Vec<_>>());
    }

    #[test]
    fn score_filter_after_topk() {
        let a = vec![car_at(0.0, 0.0), car_at(10.0, 0.0), car_at(20.0, 0.0)];
        let set = single_group(a.clone());
        let cfg = NmsConfig {
            pre_max: 2,
            ..NmsConfig::default()
        };
        let dets = decode_and_suppress(&set, &[identity_output(&a, &[0.05, 0.7, 0.3])], &cfg, FRAC_PI_4).unwrap();
        assert_eq!(dets.groups[0].iter().map(|d| d.anchor).collect::<Vec<_>>(), vec![1, 2]);
        let dets = decode_and_suppress(&set, &[identity_output(&a, &[0.05, 0.09, 0.3])], &cfg, FRAC_PI_4).unwrap();
        assert_eq!(dets.len(), 1);
    }

    #[test]
    fn argmax_class_decodes_with_its_slot() {
        let anchors = vec![
            Box3D::new(ClassId::Bus, [0.0, 0.0, 0.0], [10.0, 3.0, 3.5], 0.0),
            Box3D::new(ClassId::Trailer, [0.0, 0.0, 0.0], [10.0, 3.0, 3.5], 0.0),
        ];
        let set = AnchorSet {
            groups: vec![GroupAnchors {
                classes: vec![ClassId::Bus, ClassId::Trailer],
                anchors: anchors.clone(),
                grid: [0, 0],
            }],
        };
        let out = GroupOutput {
            scores: vec![vec![0.2, 0.7], vec![0.1, 0.15]],
            reg: vec![[0.0; CODE_SIZE]; 2],
            dir: vec![1, 1],
        };
        let dets = decode_and_suppress(&set, &[out], &NmsConfig::default(), FRAC_PI_4).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets.groups[0][0].bbox.class, ClassId::Trailer);
        assert_eq!(dets.groups[0][0].bbox.score, 0.7);
    }

    #[test]
    fn decoded_geometry_matches_encoding() {
        let a = car_at(5.0, 5.0);
        let gt = Box3D::new(ClassId::Car, [5.5, 4.0, -0.9], [4.5, 1.9, 1.6], 2.0).with_velocity(3.0, -1.0);
        let set = single_group(vec![a]);
        let out = GroupOutput {
            scores: vec![vec![0.9]],
            reg: vec![encode_box(&a, &gt).unwrap()],
            dir: vec![direction_target(gt.yaw, FRAC_PI_4)],
        };
        let dets = decode_and_suppress(&set, &[out], &NmsConfig::default(), FRAC_PI_4).unwrap();
        let b = dets.groups[0][0].bbox;
        assert!((b.cx - gt.cx).abs() < 1e-12 && (b.yaw - gt.yaw).abs() < 1e-12 && (b.vx - 3.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = vec![car_at(0.0, 0.0)];
        let set = single_group(a.clone());
        let mut out = identity_output(&a, &[0.5]);
        out.reg.push([0.0; CODE_SIZE]);
        assert!(matches!(
            decode_and_suppress(&set, &[out], &NmsConfig::default(), FRAC_PI_4),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            decode_and_suppress(&set, &[], &NmsConfig::default(), FRAC_PI_4),
            Err(Error::Shape(_))
        ));
        let mut out = identity_output(&a, &[0.5]);
        out.scores[0].push(0.1);
        assert!(decode_and_suppress(&set, &[out], &NmsConfig::default(), FRAC_PI_4).is_err());
    }

    #[test]
    fn attribute_rules() {
        let cat = ClassCatalog::default();
        let mk = |class, vx| Detection {
            bbox: Box3D::new(class, [0.0; 3], [1.0; 3], 0.0).with_velocity(vx, 0.0),
            group: 0,
            anchor: 0,
        };
        let mut set = DetectionSet {
            groups: vec![vec![
                mk(ClassId::Bicycle, 2.0),
                mk(ClassId::Bicycle, 0.0),
                mk(ClassId::Barrier, 0.0),
                mk(ClassId::Motorcycle, 1.5),
                mk(ClassId::Car, 5.0),
            ]],
        };
        assign_attributes(&mut set, &cat, 1.0);
        let attrs: Vec<_> = set.iter().map(|d| d.bbox.attribute).collect();
        assert_eq!(
            attrs,
            vec![
                Some(Attribute::CycleWithRider),
                Some(Attribute::CycleWithoutRider),
                None,
                Some(Attribute::CycleWithRider),
                Some(Attribute::VehicleParked),
            ]
        );
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let det = Detection {
            bbox: car_at(1.0, 2.0).with_score(0.75).with_attribute(Some(Attribute::VehicleMoving)),
            group: 0,
            anchor: 17,
        };
        let set = DetectionSet {
            groups: vec![vec![det]],
        };
        let path = dir.path().join("d.jsonl");
        set.write_jsonl(&path, "s0").unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"sample_id\":\"s0\"") && text.contains("\"group\":0"));
        assert_eq!(read_detections(&path).unwrap(), vec![("s0".to_string(), det)]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn nms_contract(
                raw in proptest::collection::vec(
                    (-20.0f64..20.0, -20.0f64..20.0, 1.0f64..5.0, 0.5f64..2.5, -3.2f64..3.2, 0.0f64..1.0), 1..150)
            ) {
                let anchors: Vec<Box3D> = raw.iter()
                    .map(|&(x, y, l, w, yaw, _)| Box3D::new(ClassId::Car, [x, y, 0.0], [l, w, 1.5], yaw))
                    .collect();
                let scores: Vec<f64> = raw.iter().map(|r| r.5).collect();
                let set = single_group(anchors.clone());
                let out = identity_output(&anchors, &scores);
                let dets = decode_and_suppress(&set, &[out], &NmsConfig::default(), FRAC_PI_4).unwrap();
                let g = &dets.groups[0];
                prop_assert!(g.len() <= 80);
                for (i, d) in g.iter().enumerate() {
                    prop_assert!(d.bbox.score >= 0.1);
                    prop_assert_eq!(d.bbox.score, scores[d.anchor]);
                    let src = anchors[d.anchor];
                    prop_assert!((d.bbox.cx - src.cx).abs() < 1e-12 && (d.bbox.l - src.l).abs() < 1e-12);
                    if i > 0 {
                        prop_assert!(g[i - 1].bbox.score >= d.bbox.score);
                    }
                    for e in &g[..i] {
                        prop_assert!(bev_iou(&e.bbox, &d.bbox) <= 0.2);
                    }
                }
            }
        }
    }
}
