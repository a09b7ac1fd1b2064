//! `groupdet`: batch front end for the detection data pipeline.
//!
//! Exit status is 0 on success, 1 when the pipeline reports an error and 2
//! for command-line usage errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use groupdet::anchors::{assign_all, generate_anchors, AnchorTarget, CODE_SIZE};
use groupdet::dataset::{build_index, read_labels, read_points, read_sample, write_sample, write_synth_dataset, SynthConfig};
use groupdet::decode::{assign_attributes, decode_and_suppress, read_detections, GroupOutput};
use groupdet::eval::evaluate;
use groupdet::geometry::global_transform;
use groupdet::ground::{estimate_ground, fit_plane_ransac};
use groupdet::gt_aug::{build_gt_database, place_samples, GtDatabase};
use groupdet::render::{render_bev, render_pr_curves, save_png, BevView};
use groupdet::sampler::build_epoch;
use groupdet::voxel::voxelize;
use groupdet::{Box3D, DatasetIndex, Error, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "groupdet", version, about = "Class-balanced lidar detection data pipeline")]
struct Cli {
    /// TOML configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (outputs do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset directory and write the sample index.
    Index {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one class-balanced epoch; writes one sample id per line.
    SampleEpoch {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the ground plane of a point file; prints `A B C D inliers`.
    PlaneFit {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Fail instead of falling back to the default plane, and use all points.
        #[arg(long)]
        strict: bool,
    },
    /// Crop labelled objects of an indexed dataset into a database directory.
    BuildGtdb {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        min_points: Option<usize>,
    },
    /// Paste database objects into a sample on its estimated ground plane.
    Augment {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        gtdb: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Also apply a random global flip/scale/rotate/translate.
        #[arg(long)]
        global: bool,
        /// Output directory for `<sample_id>.bin` and `<sample_id>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxelize a point file into `<out>.coords.bin`, `<out>.features.bin`, `<out>.header.txt`.
    Voxelize {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign anchor targets for a label file; writes foreground anchors as JSON lines.
    AssignTargets {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode sparse per-anchor predictions into detections (JSON lines).
    Decode {
        /// JSON lines of `{group, anchor, scores, reg, dir}`; absent anchors score 0.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        sample_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against the labels of an indexed dataset.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for PR-curve and BEV images.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        max_per_class: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Render points, labels and optional detections from above.
    RenderBev {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Index { root, out } => {
            let index = build_index(&root)?;
            index.write(&out)?;
            println!("{} samples", index.len());
        }
        Command::SampleEpoch {
            index,
            fraction,
            seed,
            out,
        } => {
            let index = DatasetIndex::read(&index)?;
            let plan = build_epoch(&index, fraction, seed)?;
            plan.write(&out)?;
            println!("target {} per class, {} entries", plan.target, plan.len());
        }
        Command::PlaneFit { points, seed, strict } => {
            let pts = read_points(&points)?;
            let params = cfg.ransac.clone().with_seed(seed);
            let plane = if strict {
                params.validate()?;
                fit_plane_ransac(&pts, &params)?
            } else {
                estimate_ground(&pts, &params)?
            };
            println!(
                "{} {} {} {} {}",
                plane.a, plane.b, plane.c, plane.d, plane.inlier_count
            );
        }
        Command::BuildGtdb {
            index,
            out,
            min_points,
        } => {
            let index = DatasetIndex::read(&index)?;
            let db = build_gt_database(&index, min_points.unwrap_or(cfg.gt_aug.min_points))?;
            db.save(&out)?;
            println!("{} entries", db.len());
        }
        Command::Augment {
            sample,
            gtdb,
            seed,
            global,
            out,
        } => {
            let input = read_sample(&sample.points, &sample.labels)?;
            let db = GtDatabase::load(&gtdb)?;
            let plane = estimate_ground(&input.points, &cfg.ransac.clone().with_seed(seed))?;
            let aug = place_samples(&input, &db, &plane, &cfg.gt_aug, &cfg.voxel.range, seed)?;
            let result = if global {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1);
                global_transform(&aug.sample, &cfg.augment.sample(&mut rng))?
            } else {
                aug.sample
            };
            write_sample(&out, &result)?;
            println!("{} boxes placed", aug.placed);
        }
        Command::Voxelize { points, out } => {
            cfg.voxel.validate()?;
            let v = voxelize(&read_points(&points)?, &cfg.voxel);
            v.write(&out)?;
            let [nx, ny, nz] = v.grid_dims;
            println!("dims {nx} {ny} {nz} count {}", v.len());
        }
        Command::AssignTargets { labels, out } => {
            let (_, boxes) = read_labels(&labels)?;
            let anchors = generate_anchors(&cfg.voxel, &cfg.catalog, &cfg.groups)?;
            let targets = assign_all(&anchors, &boxes, &cfg.groups, cfg.anchors.direction_offset)?;
            let file = fs::File::create(&out).map_err(io_err(&out))?;
            let mut w = BufWriter::new(file);
            for (g, t) in targets.iter().enumerate() {
                for (i, c) in t.cls.iter().enumerate() {
                    if let AnchorTarget::Foreground(class) = c {
                        let rec = serde_json::json!({
                            "group": g,
                            "anchor": i,
                            "class": class,
                            "label": t.matched[i],
                            "reg": t.reg[i],
                            "dir": t.dir[i],
                        });
                        writeln!(w, "{rec}").map_err(io_err(&out))?;
                    }
                }
                println!(
                    "group {g}: positive {} ignore {} negative {}",
                    t.positives(),
                    t.count(AnchorTarget::Ignore),
                    t.count(AnchorTarget::Background)
                );
            }
            w.flush().map_err(io_err(&out))?;
        }
        Command::Decode {
            predictions,
            sample_id,
            out,
        } => {
            let anchors = generate_anchors(&cfg.voxel, &cfg.catalog, &cfg.groups)?;
            let outputs = read_predictions(&predictions, &anchors)?;
            let mut dets = decode_and_suppress(&anchors, &outputs, &cfg.nms, cfg.anchors.direction_offset)?;
            assign_attributes(&mut dets, &cfg.catalog, cfg.nms.rider_velocity);
            dets.write_jsonl(&out, &sample_id)?;
            println!("{} detections", dets.len());
        }
        Command::Eval { gt, dets, out, plot } => {
            let index = DatasetIndex::read(&gt)?;
            let mut gts: BTreeMap<String, Vec<Box3D>> = BTreeMap::new();
            for e in index.entries() {
                let (_, boxes) = read_labels(&e.labels)?;
                gts.insert(e.sample_id.clone(), boxes);
            }
            let mut detections: BTreeMap<String, Vec<Box3D>> = BTreeMap::new();
            for (sample, d) in read_detections(&dets)? {
                detections.entry(sample).or_default().push(d.bbox);
            }
            let report = evaluate(&gts, &detections, &cfg.eval)?;
            let text = report.to_json();
            println!("{text}");
            if let Some(out) = out {
                fs::write(&out, &text).map_err(io_err(&out))?;
            }
            if let Some(dir) = plot {
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                for (class, m) in &report.classes {
                    if m.num_gt > 0 {
                        save_png(&render_pr_curves(&m.curves, 400), &dir.join(format!("pr_{class}.png")))?;
                    }
                }
                if let Some(e) = index.entries().first() {
                    let points = read_points(&e.points)?;
                    let d = detections.get(&e.sample_id).map(Vec::as_slice).unwrap_or(&[]);
                    let view = BevView {
                        range: cfg.voxel.range,
                        ..BevView::default()
                    };
                    let img = render_bev(&points, &gts[&e.sample_id], d, &view);
                    save_png(&img, &dir.join(format!("bev_{}.png", e.sample_id)))?;
                }
            }
        }
        Command::Synth {
            out,
            samples,
            max_per_class,
            seed,
        } => {
            let synth = SynthConfig {
                range: cfg.voxel.range,
                catalog: cfg.catalog.clone(),
                ..SynthConfig::default()
            };
            let ids = write_synth_dataset(&synth, &out, samples, max_per_class, seed)?;
            println!("{} samples", ids.len());
        }
        Command::RenderBev { sample, dets, out } => {
            let s = read_sample(&sample.points, &sample.labels)?;
            let d: Vec<Box3D> = match dets {
                Some(p) => read_detections(&p)?
                    .into_iter()
                    .filter(|(id, _)| *id == s.sample_id)
                    .map(|(_, d)| d.bbox)
                    .collect(),
                None => Vec::new(),
            };
            let view = BevView {
                range: cfg.voxel.range,
                ..BevView::default()
            };
            save_png(&render_bev(&s.points, &s.labels, &d, &view), &out)?;
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct PredictionRecord {
    group: usize,
    anchor: usize,
    scores: Vec<f64>,
    #[serde(default)]
    reg: Option<[f64; CODE_SIZE]>,
    #[serde(default)]
    dir: u8,
}

/// Dense group outputs from sparse records; unlisted anchors score zero.
fn read_predictions(path: &Path, anchors: &groupdet::anchors::AnchorSet) -> Result<Vec<GroupOutput>> {
    let mut outputs: Vec<GroupOutput> = anchors
        .groups
        .iter()
        .map(|g| GroupOutput {
            scores: vec![vec![0.0; g.classes.len()]; g.len()],
            reg: vec![[0.0; CODE_SIZE]; g.len()],
            dir: vec![0; g.len()],
        })
        .collect();
    let file = fs::File::open(path).map_err(io_err(path))?;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        let out = outputs.get_mut(rec.group).ok_or_else(|| {
            Error::Shape(format!("line {}: group {} does not exist", n + 1, rec.group))
        })?;
        if rec.anchor >= out.scores.len() || rec.scores.len() != out.scores[rec.anchor].len() {
            return Err(Error::Shape(format!(
                "line {}: anchor {} with {} scores does not fit group {}",
                n + 1,
                rec.anchor,
                rec.scores.len(),
                rec.group
            )));
        }
        out.scores[rec.anchor] = rec.scores;
        out.reg[rec.anchor] = rec.reg.unwrap_or([0.0; CODE_SIZE]);
        out.dir[rec.anchor] = rec.dir;
    }
    Ok(outputs)
}
