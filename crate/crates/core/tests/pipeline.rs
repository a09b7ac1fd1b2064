use std::collections::BTreeMap;

use groupdet::anchors::{generate_anchors, AnchorSet, CODE_SIZE};
use groupdet::dataset::{build_index, read_labels, write_synth_dataset, SynthConfig};
use groupdet::eval::{evaluate, EvalConfig};
use groupdet::flat::{assign_targets_flat, build_epoch_flat, decode_flat, voxelize_flat, FlatGroupOutput};
use groupdet::geometry::bev_iou;
use groupdet::ground::{estimate_ground, RansacParams};
use groupdet::gt_aug::{build_gt_database, place_samples};
use groupdet::sampler::build_epoch;
use groupdet::{Box3D, ClassId, PipelineConfig};

fn flat_boxes(boxes: &[Box3D]) -> (Vec<f32>, Vec<i32>) {
    let rows = boxes
        .iter()
        .flat_map(|b| [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, b.vx, b.vy].map(|v| v as f32))
        .collect();
    (rows, boxes.iter().map(|b| b.class.index() as i32).collect())
}

/// Head outputs that reproduce the assigned targets exactly.
fn oracle_outputs(anchors: &AnchorSet, boxes: &[f32], classes: &[i32], cfg: &PipelineConfig) -> Vec<(Vec<f32>, Vec<f32>, Vec<i32>)> {
    let targets = assign_targets_flat(anchors, boxes, classes, &cfg.groups, cfg.anchors.direction_offset).unwrap();
    anchors
        .groups
        .iter()
        .zip(targets)
        .map(|(g, t)| {
            let k = g.classes.len();
            let mut scores = vec![0.0f32; g.len() * k];
            for (i, &label) in t.labels.iter().enumerate() {
                if label > 0 {
                    scores[i * k + label as usize - 1] = 0.9;
                }
            }
            let dir = t.dir.iter().map(|&d| d.max(0)).collect();
            (scores, t.reg, dir)
        })
        .collect()
}

#[test]
fn synthetic_dataset_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    let ids = write_synth_dataset(&SynthConfig::default(), dir.path(), 6, 2, 21).unwrap();
    assert_eq!(ids.len(), 6);

    let index = build_index(dir.path()).unwrap();
    assert_eq!(index.len(), 6);
    let plan = build_epoch(&index, 1.0, 4).unwrap();
    let counts: Vec<u32> = index
        .entries()
        .iter()
        .flat_map(|e| e.counts.map(|c| c as u32))
        .collect();
    let flat_plan = build_epoch_flat(&counts, 1.0, 4).unwrap();
    assert_eq!(flat_plan.len(), plan.sample_ids.len());
    for (i, id) in flat_plan.iter().zip(&plan.sample_ids) {
        assert_eq!(&index.entries()[*i as usize].sample_id, id);
    }

    let db = build_gt_database(&index, cfg.gt_aug.min_points).unwrap();
    let sample = index.entries()[0].load().unwrap();
    let plane = estimate_ground(&sample.points, &RansacParams::default().with_seed(1)).unwrap();
    let aug = place_samples(&sample, &db, &plane, &cfg.gt_aug, &cfg.voxel.range, 1).unwrap();
    assert!(aug.placed > 0);
    let labels = &aug.sample.labels;
    for i in 0..labels.len() {
        for j in 0..i {
            assert_eq!(bev_iou(&labels[i], &labels[j]), 0.0);
        }
    }

    let raw: Vec<f32> = aug
        .sample
        .points
        .iter()
        .flat_map(|p| p.to_array().map(|v| v as f32))
        .collect();
    let vox = voxelize_flat(&raw, &cfg.voxel).unwrap();
    assert_eq!(vox.grid_dims, [1008, 1024, 40]);
    assert!(vox.counts.iter().all(|&c| (1..=10).contains(&c)));

    // perfect head outputs decode back to the labels
    let anchors = generate_anchors(&cfg.voxel, &cfg.catalog, &cfg.groups).unwrap();
    let (boxes, classes) = flat_boxes(labels);
    let outputs = oracle_outputs(&anchors, &boxes, &classes, &cfg);
    let views: Vec<FlatGroupOutput> = outputs
        .iter()
        .map(|(s, r, d)| FlatGroupOutput { scores: s, reg: r, dir: d })
        .collect();
    let dets = decode_flat(&anchors, &views, &cfg.nms, cfg.anchors.direction_offset).unwrap();
    let decoded: Vec<Box3D> = dets
        .boxes
        .chunks_exact(CODE_SIZE)
        .zip(&dets.classes)
        .map(|(r, &c)| {
            let r: [f64; CODE_SIZE] = std::array::from_fn(|i| r[i] as f64);
            Box3D::new(ClassId::from_index(c as usize).unwrap(), [r[0], r[1], r[2]], [r[3], r[4], r[5]], r[6])
                .with_velocity(r[7], r[8])
                .with_score(0.9)
        })
        .collect();
    assert_eq!(decoded.len(), labels.len());

    let gts = BTreeMap::from([(aug.sample.sample_id.clone(), labels.clone())]);
    let report = evaluate(&gts, &BTreeMap::from([(aug.sample.sample_id.clone(), decoded)]), &EvalConfig::default()).unwrap();
    assert!((report.map - 1.0).abs() < 1e-9, "mAP {}", report.map);
    assert!(report.tp.ate < 1e-3 && report.tp.ave < 1e-3);
}

#[test]
fn labels_round_trip_through_flat_targets() {
    let dir = tempfile::tempdir().unwrap();
    write_synth_dataset(&SynthConfig::default(), dir.path(), 1, 2, 3).unwrap();
    let (_, labels) = read_labels(&dir.path().join("synth_00000.json")).unwrap();
    assert!(!labels.is_empty());

    let cfg = PipelineConfig::default();
    let anchors = generate_anchors(&cfg.voxel, &cfg.catalog, &cfg.groups).unwrap();
    let (boxes, classes) = flat_boxes(&labels);
    let targets = assign_targets_flat(&anchors, &boxes, &classes, &cfg.groups, cfg.anchors.direction_offset).unwrap();
    let positives: usize = targets.iter().map(|t| t.labels.iter().filter(|&&l| l > 0).count()).sum();
    // every label is force-matched to at least one anchor
    assert!(positives >= labels.len());
    for t in &targets {
        for (i, &l) in t.labels.iter().enumerate() {
            assert_eq!(t.reg_weight[i], if l > 0 { 1.0 } else { 0.0 });
            assert_eq!(t.dir[i] >= 0, l > 0);
        }
    }
}
