//! End-to-end pseudo-label generation over a sequence directory:
//! detections → tracklets → motion state → temporal targets → refinement →
//! propagation → labels and evaluation, repeated per iteration.
//!
//! A sequence directory holds `detections/` (plus `detections_<k>/` for
//! later iterations), `velodyne/`, `masks/`, `poses.txt`, `calib.txt`,
//! `shape_space.bin` and optionally `label_gt/`.

pub mod config;
pub mod io;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::chamfer::{Frame, IndexedScan, InstanceMask, LabelImage, PointCloud};
use crate::eval::{evaluate, report_text, write_report_csv, Box3D, BoxGeometry, Metric};
use crate::exec;
use crate::geometry::{to_global_translation, to_global_yaw, EgoTrajectory, Vec3};
use crate::motion::{
    classify_motion, global_linear_targets, moving_targets, static_targets, velocity_profile, GlobalTrack,
    MotionParams, MovingParams, TemporalTargets,
};
use crate::refine::{propagate_static, refine_observation, RefineError, RefinementConfig, TargetRef};
use crate::scenario::box_outline;
use crate::shapespace::{ShapeCode, ShapeError, ShapeSpace};
use crate::tracker::{associate, MotionState, ObjectObservation, TrackerParams, Tracklet};

use io::{Calibration, IoError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing input {0}")]
    InputMissing(PathBuf),
    #[error("calibration invalid in {path}: {message}")]
    CalibrationInvalid { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Shape {
        path: PathBuf,
        #[source]
        source: ShapeError,
    },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("refinement failed: {0}")]
    Refine(#[from] RefineError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] crate::eval::EvalError),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MotionModel {
    #[default]
    PiecewiseLinear,
    GlobalLinear,
}

impl FromStr for MotionModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "piecewise_linear" | "piecewise-linear" => Ok(Self::PiecewiseLinear),
            "global_linear" | "global-linear" | "linear" => Ok(Self::GlobalLinear),
            _ => Err(format!("unknown motion model {s:?} (piecewise_linear | global_linear)")),
        }
    }
}

/// Frame in which `poses.txt` is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoseFrame {
    #[default]
    Camera,
    /// Converted to the camera through `Tr_imu_to_velo` and `Tr_velo_to_cam`.
    Imu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub iterations: usize,
    pub motion_model: MotionModel,
    /// `false` runs the Chamfer-only baseline (both λ set to zero).
    pub temporal: bool,
    pub tracker: TrackerParams,
    pub motion: MotionParams,
    pub moving: MovingParams,
    pub histogram_bins: usize,
    pub refinement: RefinementConfig,
    pub frame_rate: f64,
    /// Camera-frame height of the ground plane.
    pub ground_height: f64,
    /// Returns lower than this above the ground are dropped.
    pub ground_margin: f64,
    /// Returns farther than this from the detection (ground plane) are dropped.
    pub scan_gate: f64,
    /// Smallest 2D IoU between a projected detection and a mask instance.
    pub mask_match_iou: f64,
    pub ground_clearance: f64,
    pub iou_threshold: f64,
    /// 0 uses the global thread pool.
    pub threads: usize,
    pub pose_frame: PoseFrame,
    pub input: PathBuf,
    pub output: PathBuf,
    /// Defaults to `<input>/shape_space.bin`.
    pub shape_space: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            motion_model: MotionModel::PiecewiseLinear,
            temporal: true,
            tracker: TrackerParams::default(),
            motion: MotionParams::default(),
            moving: MovingParams::default(),
            histogram_bins: 32,
            refinement: RefinementConfig::default(),
            frame_rate: 10.0,
            ground_height: 1.65,
            ground_margin: 0.1,
            scan_gate: 4.0,
            mask_match_iou: 0.3,
            ground_clearance: 0.15,
            iou_threshold: 0.5,
            threads: 0,
            pose_frame: PoseFrame::Camera,
            input: PathBuf::from("."),
            output: PathBuf::from("output"),
            shape_space: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.iterations == 0 {
            return Err(PipelineError::Config("iterations must be at least 1".into()));
        }
        if self.frame_rate < 10.0 {
            return Err(PipelineError::Config("frame_rate must be at least 10 Hz".into()));
        }
        self.refinement
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Refinement settings after the temporal toggle.
    pub fn effective_refinement(&self) -> RefinementConfig {
        if self.temporal {
            self.refinement
        } else {
            self.refinement.chamfer_only()
        }
    }
}

/// One output box.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBox {
    pub boxed: Box3D,
    pub track_id: usize,
    pub detected: bool,
    pub state: MotionState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame_index: usize,
    pub boxes: Vec<LabeledBox>,
}

impl LabeledFrame {
    pub fn boxes(&self) -> Vec<Box3D> {
        self.boxes.iter().map(|b| b.boxed).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationResult {
    pub iteration: usize,
    pub frames: Vec<LabeledFrame>,
    pub tracklets: Vec<Tracklet>,
    pub metrics: Option<Vec<Metric>>,
}

impl IterationResult {
    pub fn metric(&self, mode: crate::eval::IouMode, interpolation: crate::eval::Interpolation) -> Option<f64> {
        self.metrics
            .as_ref()?
            .iter()
            .find(|m| m.mode == mode && m.interpolation == interpolation)
            .map(|m| m.value)
    }
}

/// Everything loaded once per sequence.
pub struct Sequence {
    pub calibration: Calibration,
    pub ego: EgoTrajectory,
    pub shape_space: ShapeSpace,
    /// Camera-frame scans.
    pub scans: Vec<Vec<Vec3>>,
    pub masks: Vec<Option<Arc<LabelImage>>>,
    pub ground_truth: Option<Vec<Vec<Box3D>>>,
}

fn require(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::InputMissing(path.to_path_buf()))
    }
}

impl Sequence {
    pub fn load(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let dir = &cfg.input;
        let calib_path = dir.join("calib.txt");
        let poses_path = dir.join("poses.txt");
        require(&calib_path)?;
        require(&poses_path)?;
        require(&dir.join("detections"))?;
        let calibration = Calibration::read(&calib_path).map_err(|e| match e {
            IoError::Calibration { path, message } => PipelineError::CalibrationInvalid { path, message },
            other => other.into(),
        })?;
        let text = io::read_text(&poses_path)?;
        let raw = EgoTrajectory::parse(&text).map_err(|e| {
            PipelineError::Io(IoError::Parse {
                path: poses_path.clone(),
                line: e.line,
                message: e.message,
            })
        })?;
        let ego = match cfg.pose_frame {
            PoseFrame::Camera => raw,
            PoseFrame::Imu => {
                let c = calibration
                    .imu_to_cam()
                    .ok_or_else(|| PipelineError::CalibrationInvalid {
                        path: calib_path.clone(),
                        message: "pose_frame = imu needs Tr_imu_to_velo".into(),
                    })?;
                raw.conjugated(&c)
            }
        };
        let ego = match ego.pose(0) {
            Some(first) => ego.moved_by(&first.inverse()),
            None => ego,
        };

        let space_path = cfg.shape_space.clone().unwrap_or_else(|| dir.join("shape_space.bin"));
        require(&space_path)?;
        let shape_space = ShapeSpace::load(&space_path).map_err(|source| PipelineError::Shape {
            path: space_path.clone(),
            source,
        })?;

        let frames = ego.len();
        let velo_dir = dir.join("velodyne");
        let mask_dir = dir.join("masks");
        let to_cam = calibration.velo_to_cam;
        let mut scans = Vec::with_capacity(frames);
        let mut masks = Vec::with_capacity(frames);
        for f in 0..frames {
            let vpath = io::frame_file(&velo_dir, f, "bin");
            scans.push(if vpath.exists() {
                io::read_velodyne(&vpath)?.iter().map(|p| to_cam.apply(p)).collect()
            } else {
                Vec::new()
            });
            let mpath = io::frame_file(&mask_dir, f, "pgm");
            masks.push(if mpath.exists() {
                Some(Arc::new(io::read_label_image(
                    &mpath,
                    calibration.intrinsics.image_width,
                )?))
            } else {
                None
            });
        }
        let gt_dir = dir.join("label_gt");
        let ground_truth = if gt_dir.is_dir() {
            Some(
                (0..frames)
                    .map(|f| {
                        let p = io::frame_file(&gt_dir, f, "txt");
                        if p.exists() {
                            io::read_labels(&p)
                        } else {
                            Ok(Vec::new())
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            calibration,
            ego,
            shape_space,
            scans,
            masks,
            ground_truth,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.ego.len()
    }

    /// Detection directory of an iteration, falling back to `detections/`.
    pub fn detection_dir(input: &Path, iteration: usize) -> PathBuf {
        let specific = input.join(format!("detections_{iteration}"));
        if iteration > 1 && specific.is_dir() {
            specific
        } else {
            input.join("detections")
        }
    }
}

/// Decoded shape and box extents of one detection.
#[derive(Debug, Clone)]
struct ShapeInfo {
    shape: Vec<Vec3>,
    geometry: BoxGeometry,
}

#[derive(Debug, Clone)]
struct FrameDetections {
    observations: Vec<ObjectObservation>,
    shapes: Vec<usize>,
    scans: Vec<Option<IndexedScan>>,
}

fn code_key(code: &ShapeCode) -> Vec<u64> {
    code.0.iter().map(|v| v.to_bits()).collect()
}

/// 2D IoU of axis-aligned pixel boxes `[u0, v0, u1, v1]`.
fn rect_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy one-to-one assignment of detections to mask instances by 2D IoU.
fn match_instances(
    boxes: &[Box3D],
    labels: &LabelImage,
    cfg: &PipelineConfig,
    k: &crate::geometry::CameraIntrinsics,
) -> Vec<Option<u8>> {
    let instances = labels.instance_boxes();
    let mut pairs = Vec::new();
    for (d, b) in boxes.iter().enumerate() {
        let hull = box_outline(b, k);
        if hull.len() < 3 {
            continue;
        }
        let (u0, u1) = hull
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p[0]), h.max(p[0])));
        let (v0, v1) = hull
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p[1]), h.max(p[1])));
        let rect = [
            u0.max(0.0),
            v0.max(0.0),
            u1.min(k.image_width as f64),
            v1.min(k.image_height as f64),
        ];
        for (id, r) in &instances {
            let iou = rect_iou(&rect, r);
            if iou >= cfg.mask_match_iou {
                pairs.push((iou, d, *id));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; boxes.len()];
    let mut taken = [false; 256];
    for (_, d, id) in pairs {
        if out[d].is_none() && !taken[id as usize] {
            out[d] = Some(id);
            taken[id as usize] = true;
        }
    }
    out
}

/// Scan points of one detection: inside its mask, above the ground and near
/// the detected box.
fn object_scan(
    scan: &[Vec3],
    mask: &InstanceMask,
    center: &Vec3,
    cfg: &PipelineConfig,
    k: &crate::geometry::CameraIntrinsics,
) -> Option<IndexedScan> {
    let limit = cfg.ground_height - cfg.ground_margin;
    let kept: Vec<Vec3> = scan
        .iter()
        .filter(|p| p.y < limit && (p.x - center.x).hypot(p.z - center.z) <= cfg.scan_gate)
        .filter(|p| {
            let proj = k.project(p);
            proj.valid && mask.contains(proj.u, proj.v)
        })
        .copied()
        .collect();
    (!kept.is_empty()).then(|| IndexedScan::new(&PointCloud::new(kept, Frame::Camera)))
}

fn load_detections(
    seq: &Sequence,
    cfg: &PipelineConfig,
    iteration: usize,
    shapes: &mut Vec<ShapeInfo>,
    index: &mut HashMap<Vec<u64>, usize>,
) -> Result<Vec<FrameDetections>, PipelineError> {
    let dir = Sequence::detection_dir(&cfg.input, iteration);
    let k = seq.calibration.intrinsics;
    let mut records = Vec::with_capacity(seq.frame_count());
    for f in 0..seq.frame_count() {
        let path = io::frame_file(&dir, f, "txt");
        records.push(if path.exists() {
            io::read_detections(&path)?
        } else {
            Vec::new()
        });
    }
    for (f, recs) in records.iter().enumerate() {
        for r in recs {
            let key = code_key(&r.shape_code);
            if index.contains_key(&key) {
                continue;
            }
            let shape = seq
                .shape_space
                .decode(&r.shape_code)
                .map_err(|source| PipelineError::Shape {
                    path: io::frame_file(&dir, f, "txt"),
                    source,
                })?;
            let geometry = BoxGeometry::of_shape(&shape, cfg.ground_clearance);
            index.insert(key, shapes.len());
            shapes.push(ShapeInfo { shape, geometry });
        }
    }
    let shapes_ref: &[ShapeInfo] = shapes;
    let index_ref: &HashMap<Vec<u64>, usize> = index;
    let frames = exec::map_range(seq.frame_count(), |f| {
        let recs = &records[f];
        let boxes: Vec<Box3D> = recs.iter().map(|r| r.boxed).collect();
        let matches = match &seq.masks[f] {
            Some(labels) => match_instances(&boxes, labels, cfg, &k),
            None => vec![None; recs.len()],
        };
        let mut out = FrameDetections {
            observations: Vec::with_capacity(recs.len()),
            shapes: Vec::with_capacity(recs.len()),
            scans: Vec::with_capacity(recs.len()),
        };
        for (r, m) in recs.iter().zip(matches) {
            let s = index_ref[&code_key(&r.shape_code)];
            let pose = shapes_ref[s].geometry.pose_of(&r.boxed);
            let center = r.boxed.center - Vec3::new(0.0, r.boxed.height / 2.0, 0.0);
            let scan = match (m, &seq.masks[f]) {
                (Some(id), Some(labels)) => {
                    let mask = InstanceMask::Instance {
                        labels: Arc::clone(labels),
                        id,
                    };
                    object_scan(&seq.scans[f], &mask, &center, cfg, &k)
                }
                _ => None,
            };
            out.observations.push(ObjectObservation {
                frame_index: f,
                pose,
                shape_code: r.shape_code.clone(),
                confidence: r.boxed.score,
                detected: true,
            });
            out.shapes.push(s);
            out.scans.push(scan);
        }
        out
    });
    Ok(frames)
}

fn temporal_targets(track: &GlobalTrack, state: MotionState, seq: &Sequence, cfg: &PipelineConfig) -> TemporalTargets {
    let result = match state {
        MotionState::Static => static_targets(track, &seq.ego, cfg.histogram_bins),
        MotionState::Moving => match cfg.motion_model {
            MotionModel::PiecewiseLinear => moving_targets(track, &seq.ego, &cfg.moving),
            MotionModel::GlobalLinear => global_linear_targets(track, &seq.ego, &cfg.moving),
        },
        MotionState::Undecided => return TemporalTargets::undecided(),
    };
    result.unwrap_or_else(|e| {
        log::debug!("no temporal targets ({e}); refining without them");
        TemporalTargets::undecided()
    })
}

/// Runs one iteration on a loaded sequence.
pub fn run_iteration(seq: &Sequence, cfg: &PipelineConfig, iteration: usize) -> Result<IterationResult, PipelineError> {
    let mut shapes = Vec::new();
    let mut index = HashMap::new();
    let frames = load_detections(seq, cfg, iteration, &mut shapes, &mut index)?;

    // detections keep their frame-local index through tracking via the
    // confidence-independent lookup below
    let per_frame: Vec<Vec<ObjectObservation>> = frames.iter().map(|f| f.observations.clone()).collect();
    let mut tracklets = associate(&per_frame, &seq.ego, &cfg.tracker);
    let mut origin: Vec<Vec<(usize, usize)>> = Vec::with_capacity(tracklets.len());
    {
        let mut used: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.observations.len()]).collect();
        for t in &tracklets {
            let mut ids = Vec::with_capacity(t.len());
            for obs in &t.observations {
                let f = obs.frame_index;
                let d = frames[f]
                    .observations
                    .iter()
                    .enumerate()
                    .position(|(i, o)| !used[f][i] && o == obs)
                    .expect("tracked observation comes from its frame");
                used[f][d] = true;
                ids.push((f, d));
            }
            origin.push(ids);
        }
    }

    let refinement = cfg.effective_refinement();
    let mut states = Vec::with_capacity(tracklets.len());
    let mut targets = Vec::with_capacity(tracklets.len());
    for t in tracklets.iter_mut() {
        let track = GlobalTrack::from_tracklet(t, &seq.ego, cfg.frame_rate)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let state = classify_motion(&track, &cfg.motion);
        t.motion_state = state;
        states.push(state);
        targets.push(temporal_targets(&track, state, seq, cfg));
    }

    let jobs: Vec<(usize, usize)> = tracklets
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |oi| (ti, oi)))
        .collect();
    let refined: Vec<Result<ObjectObservation, RefineError>> = exec::map(&jobs, |&(ti, oi)| {
        let obs = &tracklets[ti].observations[oi];
        let (f, d) = origin[ti][oi];
        let shape = &shapes[frames[f].shapes[d]].shape;
        let scan = frames[f].scans[d].as_ref();
        let target = match targets[ti].get(oi) {
            Some(t) => TargetRef::new(targets[ti].state, t),
            None => TargetRef::none(),
        };
        match refine_observation(obs, shape, scan, target, &refinement) {
            Err(RefineError::NoSignal) => Ok(obs.clone()),
            other => other,
        }
    });
    let mut refined = refined.into_iter();
    for t in tracklets.iter_mut() {
        for obs in t.observations.iter_mut() {
            *obs = refined.next().expect("one result per job")?;
        }
    }

    let k = seq.calibration.intrinsics;
    let mut labeled: Vec<Vec<LabeledBox>> = vec![Vec::new(); seq.frame_count()];
    for (ti, t) in tracklets.iter().enumerate() {
        for (oi, obs) in t.observations.iter().enumerate() {
            let (f, d) = origin[ti][oi];
            let geometry = &shapes[frames[f].shapes[d]].geometry;
            labeled[f].push(LabeledBox {
                boxed: geometry.to_box(&obs.pose, obs.confidence),
                track_id: t.track_id,
                detected: true,
                state: states[ti],
            });
        }
        if states[ti] != MotionState::Static {
            continue;
        }
        let Ok(track) = GlobalTrack::from_tracklet(t, &seq.ego, cfg.frame_rate) else {
            continue;
        };
        let Ok(refined_targets) = static_targets(&track, &seq.ego, cfg.histogram_bins) else {
            continue;
        };
        let Some(anchor) = refined_targets.get(0) else {
            continue;
        };
        let (f0, d0) = origin[ti][0];
        let geometry = &shapes[frames[f0].shapes[d0]].geometry;
        for p in propagate_static(t, &anchor.global_translation, anchor.global_yaw, &seq.ego, &k) {
            labeled[p.frame_index].push(LabeledBox {
                boxed: geometry.to_box(&p.pose, p.confidence),
                track_id: t.track_id,
                detected: false,
                state: MotionState::Static,
            });
        }
    }
    for boxes in labeled.iter_mut() {
        boxes.sort_by_key(|b| b.track_id);
    }
    let frames_out: Vec<LabeledFrame> = labeled
        .into_iter()
        .enumerate()
        .map(|(frame_index, boxes)| LabeledFrame { frame_index, boxes })
        .collect();

    let metrics = match &seq.ground_truth {
        Some(gt) => {
            let dets: Vec<Vec<Box3D>> = frames_out.iter().map(LabeledFrame::boxes).collect();
            Some(evaluate(&format!("iter_{iteration}"), &dets, gt, cfg.iou_threshold)?)
        }
        None => None,
    };
    Ok(IterationResult {
        iteration,
        frames: frames_out,
        tracklets,
        metrics,
    })
}

pub fn write_iteration(dir: &Path, result: &IterationResult) -> Result<(), PipelineError> {
    let label_dir = dir.join("label");
    for frame in &result.frames {
        io::write_labels(&io::frame_file(&label_dir, frame.frame_index, "txt"), &frame.boxes())?;
    }
    let tracks_path = dir.join("tracks.csv");
    let csv_err = |source| PipelineError::Csv {
        path: tracks_path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&tracks_path).map_err(csv_err)?;
    w.write_record(["frame", "track_id", "detected", "state", "x", "y", "z", "yaw", "score"])
        .map_err(csv_err)?;
    for frame in &result.frames {
        for b in &frame.boxes {
            w.write_record([
                frame.frame_index.to_string(),
                b.track_id.to_string(),
                b.detected.to_string(),
                b.state.as_str().to_string(),
                b.boxed.center.x.to_string(),
                b.boxed.center.y.to_string(),
                b.boxed.center.z.to_string(),
                b.boxed.yaw.to_string(),
                b.boxed.score.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| csv_err(e.into()))?;
    if let Some(metrics) = &result.metrics {
        io::write_text(&dir.join("report.txt"), &report_text(metrics))?;
        let path = dir.join("report.csv");
        let file = std::fs::File::create(&path).map_err(|source| IoError::Io {
            path: path.clone(),
            source,
        })?;
        write_report_csv(metrics, file).map_err(|source| PipelineError::Csv { path, source })?;
    }
    Ok(())
}

/// Runs every iteration and writes `<output>/iter_<k>/`.
pub fn run(cfg: &PipelineConfig) -> Result<Vec<IterationResult>, PipelineError> {
    cfg.validate()?;
    exec::with_threads(cfg.threads, || {
        let seq = Sequence::load(cfg)?;
        let mut results = Vec::with_capacity(cfg.iterations);
        for iteration in 1..=cfg.iterations {
            let result = run_iteration(&seq, cfg, iteration)?;
            write_iteration(&cfg.output.join(format!("iter_{iteration}")), &result)?;
            if let Some(m) = &result.metrics {
                log::info!("iteration {iteration}:\n{}", report_text(m));
            }
            results.push(result);
        }
        if results.iter().all(|r| r.metrics.is_some()) {
            let all: Vec<Metric> = results
                .iter()
                .flat_map(|r| r.metrics.clone().unwrap_or_default())
                .collect();
            io::write_text(&cfg.output.join("report.txt"), &report_text(&all))?;
        }
        Ok(results)
    })
}

/// Per-tracklet global trajectory and velocity samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackProfile {
    pub track_id: usize,
    pub state: MotionState,
    pub track: GlobalTrack,
}

/// Tracks the iteration-1 detections and classifies each tracklet.
pub fn profiles(cfg: &PipelineConfig) -> Result<Vec<TrackProfile>, PipelineError> {
    let seq = Sequence::load(cfg)?;
    let mut shapes = Vec::new();
    let mut index = HashMap::new();
    let frames = load_detections(&seq, cfg, 1, &mut shapes, &mut index)?;
    let per_frame: Vec<Vec<ObjectObservation>> = frames.into_iter().map(|f| f.observations).collect();
    associate(&per_frame, &seq.ego, &cfg.tracker)
        .iter()
        .map(|t| {
            let track = GlobalTrack::from_tracklet(t, &seq.ego, cfg.frame_rate)
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            Ok(TrackProfile {
                track_id: t.track_id,
                state: classify_motion(&track, &cfg.motion),
                track,
            })
        })
        .collect()
}

/// One row per observation: global position, heading and the velocity
/// toward the next observation (empty on the last row).
pub fn write_profiles_csv<W: std::io::Write>(profiles: &[TrackProfile], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["track_id", "state", "frame", "t", "x", "y", "z", "yaw", "vx", "vz"])?;
    for p in profiles {
        let velocity = velocity_profile(&p.track).ok();
        for i in 0..p.track.len() {
            let pos = p.track.positions[i];
            let (vx, vz) = match &velocity {
                Some(v) if i < v.len() => (v.vx[i].to_string(), v.vz[i].to_string()),
                _ => (String::new(), String::new()),
            };
            out.write_record([
                p.track_id.to_string(),
                p.state.as_str().to_string(),
                p.track.frames[i].to_string(),
                p.track.timestamps[i].to_string(),
                pos.x.to_string(),
                pos.y.to_string(),
                pos.z.to_string(),
                p.track.yaws[i].map_or(String::new(), |y| y.to_string()),
                vx,
                vz,
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads `<dir>/<frame>.txt` for frames `0..frames`; missing files are empty.
pub fn read_label_dir(dir: &Path, frames: usize) -> Result<Vec<Vec<Box3D>>, PipelineError> {
    require(dir)?;
    (0..frames)
        .map(|f| {
            let p = io::frame_file(dir, f, "txt");
            if p.exists() {
                Ok(io::read_labels(&p)?)
            } else {
                Ok(Vec::new())
            }
        })
        .collect()
}

/// Highest frame index + 1 among `<dir>/NNNNNN.txt` files.
pub fn count_frames(dir: &Path) -> Result<usize, PipelineError> {
    require(dir)?;
    let entries = std::fs::read_dir(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut count = 0;
    for e in entries.flatten() {
        let name = e.file_name();
        if let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".txt")) {
            if let Ok(i) = stem.parse::<usize>() {
                count = count.max(i + 1);
            }
        }
    }
    Ok(count)
}

/// Global pose of a labeled box given the ego trajectory.
pub fn global_box_position(b: &Box3D, frame: usize, ego: &EgoTrajectory) -> Option<(Vec3, f64)> {
    let pose = ego.pose(frame)?;
    Some((to_global_translation(&b.center, pose), to_global_yaw(b.yaw, pose).ok()?))
}
