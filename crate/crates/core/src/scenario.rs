//! Synthetic driving sequences with full ground truth: ego trajectory,
//! parked and moving cars, simulated lidar, instance masks and noisy
//! detections.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::chamfer::{visible_from_origin, LabelImage, VisibilityParams};
use crate::eval::{Box3D, BoxGeometry};
use crate::geometry::{
    heading_vector, to_local_translation, to_local_yaw, wrap_angle, yaw_rotation, CameraIntrinsics, EgoTrajectory,
    Pose4DoF, RigidTransform, Vec3,
};
use crate::pipeline::io::{self, Calibration, DetectionRecord, IoError};
use crate::shapespace::procedural::{sample_car_models, CarParams, CarTemplate};
use crate::shapespace::{build_shape_space, ShapeCode, ShapeError, ShapeSpace};
use crate::tracker::MotionState;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// A constant-rate yaw change between two frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Turn {
    pub start_frame: usize,
    pub end_frame: usize,
    /// Radians per second.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarSpec {
    pub state: MotionState,
    /// Initial global (x, z).
    pub start: [f64; 2],
    /// Initial global yaw.
    pub heading: f64,
    /// Meters per second.
    pub speed: f64,
    pub turn: Option<Turn>,
    pub params: CarParams,
}

impl CarSpec {
    pub fn parked(x: f64, z: f64, heading: f64, params: CarParams) -> Self {
        Self {
            state: MotionState::Static,
            start: [x, z],
            heading,
            speed: 0.0,
            turn: None,
            params,
        }
    }

    pub fn driving(x: f64, z: f64, heading: f64, speed: f64, turn: Option<Turn>, params: CarParams) -> Self {
        Self {
            state: MotionState::Moving,
            start: [x, z],
            heading,
            speed,
            turn,
            params,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoSpec {
    pub speed: f64,
    /// Radians per second.
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionNoise {
    /// Per-axis standard deviation of the translation error (meters).
    pub sigma_t: f64,
    pub sigma_yaw: f64,
    pub false_negative_rate: f64,
}

impl DetectionNoise {
    pub fn none() -> Self {
        Self {
            sigma_t: 0.0,
            sigma_yaw: 0.0,
            false_negative_rate: 0.0,
        }
    }
}

/// How detection noise evolves over pipeline iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSchedule {
    /// σ halves and the false-negative rate shrinks by 0.7 per iteration.
    #[default]
    Halving,
    Constant,
}

/// Noise of the detector at a (1-based) iteration.
pub fn detection_provider(iteration: usize, base: &DetectionNoise, schedule: NoiseSchedule) -> DetectionNoise {
    assert!(iteration >= 1, "iterations are 1-based");
    match schedule {
        NoiseSchedule::Constant => *base,
        NoiseSchedule::Halving => {
            let k = (iteration - 1) as i32;
            DetectionNoise {
                sigma_t: base.sigma_t * 0.5f64.powi(k),
                sigma_yaw: base.sigma_yaw * 0.5f64.powi(k),
                false_negative_rate: base.false_negative_rate * 0.7f64.powi(k),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarSpec {
    pub max_range: f64,
    /// Probability that a return is lost.
    pub dropout: f64,
    /// Gaussian range noise per coordinate (meters).
    pub noise_sigma: f64,
    /// Returns closer than this keep full model density; farther cars are
    /// thinned with the inverse square of their range. 0 disables thinning.
    pub density_range: f64,
    pub ground_points: usize,
    /// Cars occlude each other.
    pub occlusion: bool,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            max_range: 70.0,
            dropout: 0.1,
            noise_sigma: 0.02,
            density_range: 15.0,
            ground_points: 3000,
            occlusion: true,
        }
    }
}

impl LidarSpec {
    pub fn ideal() -> Self {
        Self {
            max_range: 200.0,
            dropout: 0.0,
            noise_sigma: 0.0,
            density_range: 0.0,
            ground_points: 0,
            occlusion: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub point_count: usize,
    pub latent_dim: usize,
    pub model_count: usize,
    pub seed: u64,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        Self {
            point_count: 512,
            latent_dim: 5,
            model_count: 40,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub frame_count: usize,
    pub frame_rate: f64,
    pub cars: Vec<CarSpec>,
    pub ego: EgoSpec,
    pub noise: DetectionNoise,
    pub schedule: NoiseSchedule,
    pub lidar: LidarSpec,
    pub shape: ShapeSpec,
    pub intrinsics: CameraIntrinsics,
    /// Height of the camera above the ground (the ground plane is `y = h`).
    pub camera_height: f64,
    /// Gap between the ground and a car's lowest surface point.
    pub ground_clearance: f64,
    /// Objects farther than this are not labeled.
    pub max_label_range: f64,
    /// Fewest unoccluded returns for an object to be labeled.
    pub min_label_points: usize,
    /// Label-image pixels per camera pixel.
    pub mask_scale: f64,
    pub seed: u64,
}

pub fn kitti_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(721.5377, 721.5377, 609.5593, 172.854, 1242, 375).expect("valid intrinsics")
}

/// KITTI-style velodyne → camera extrinsics (x forward, y left, z up).
pub fn kitti_velo_to_cam() -> RigidTransform {
    RigidTransform::from_row_major(&[0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, -0.08, 1.0, 0.0, 0.0, -0.27])
}

/// Global yaw of a car driving along +z.
pub const FORWARD: f64 = -FRAC_PI_2;

impl ScenarioConfig {
    /// An urban street: the ego drives down +z past parked cars on both
    /// sides, with a lead car, an oncoming car and a car turning in from a
    /// side street.
    pub fn urban(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
        let mut car = || CarParams::sample(&mut rng);
        let mut cars = Vec::new();
        for (i, z) in [8.0, 15.0, 22.0, 29.5, 37.0, 44.0, 51.0].into_iter().enumerate() {
            let heading = if i % 3 == 2 { FORWARD + PI } else { FORWARD };
            cars.push(CarSpec::parked(4.6, z, heading + 0.04 * (i as f64 - 3.0), car()));
        }
        for (i, z) in [11.0, 19.0, 27.0, 40.0, 48.0].into_iter().enumerate() {
            cars.push(CarSpec::parked(-4.8, z, FORWARD + PI + 0.03 * (i as f64 - 2.0), car()));
        }
        cars.push(CarSpec::driving(0.3, 13.0, FORWARD, 6.0, None, car()));
        cars.push(CarSpec::driving(-2.4, 55.0, FORWARD + PI, 7.0, None, car()));
        cars.push(CarSpec::driving(
            -16.0,
            33.5,
            0.0,
            5.0,
            Some(Turn {
                start_frame: 8,
                end_frame: 23,
                rate: -FRAC_PI_2 / 1.5,
            }),
            car(),
        ));
        Self {
            frame_count: 40,
            frame_rate: 10.0,
            cars,
            ego: EgoSpec {
                speed: 4.0,
                yaw_rate: 0.0,
            },
            noise: DetectionNoise {
                sigma_t: 0.5,
                sigma_yaw: 0.12,
                false_negative_rate: 0.3,
            },
            schedule: NoiseSchedule::Halving,
            lidar: LidarSpec::default(),
            shape: ShapeSpec::default(),
            intrinsics: kitti_intrinsics(),
            camera_height: 1.65,
            ground_clearance: 0.15,
            max_label_range: 50.0,
            min_label_points: 10,
            mask_scale: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::ConfigInvalid(m.to_string()));
        if self.frame_count == 0 {
            return bad("frame_count must be positive");
        }
        if self.frame_rate < 10.0 {
            return bad("frame_rate must be at least 10 Hz");
        }
        if self.cars.len() > 254 {
            return bad("at most 254 cars fit in a label image");
        }
        for (i, c) in self.cars.iter().enumerate() {
            match c.state {
                MotionState::Static if c.speed != 0.0 || c.turn.is_some() => {
                    return Err(ScenarioError::ConfigInvalid(format!(
                        "parked car {i} has a speed or turn"
                    )));
                }
                MotionState::Moving if c.speed <= 0.0 => {
                    return Err(ScenarioError::ConfigInvalid(format!(
                        "moving car {i} needs a positive speed"
                    )));
                }
                MotionState::Undecided => {
                    return Err(ScenarioError::ConfigInvalid(format!(
                        "car {i} must be static or moving"
                    )));
                }
                _ => {}
            }
        }
        let n = &self.noise;
        if !(n.sigma_t >= 0.0 && n.sigma_yaw >= 0.0 && (0.0..1.0).contains(&n.false_negative_rate)) {
            return bad("noise must be non-negative with a false-negative rate in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.lidar.dropout) || self.lidar.noise_sigma < 0.0 {
            return bad("lidar dropout must be in [0, 1) and noise non-negative");
        }
        if !(self.mask_scale > 0.0 && self.mask_scale <= 1.0) {
            return bad("mask_scale must be in (0, 1]");
        }
        self.intrinsics
            .validate()
            .map_err(|e| ScenarioError::ConfigInvalid(e.to_string()))
    }
}

/// One simulated car.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTruth {
    pub state: MotionState,
    pub shape_code: ShapeCode,
    /// Decoded object-frame surface.
    pub shape: Vec<Vec3>,
    pub geometry: BoxGeometry,
    /// Global pose at every frame.
    pub global_poses: Vec<Pose4DoF>,
}

/// A labeled object in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObject {
    pub object: usize,
    pub pose: Pose4DoF,
    pub boxed: Box3D,
    /// Unoccluded returns before dropout and thinning.
    pub visible_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    /// Camera-frame lidar returns.
    pub scan: Vec<Vec3>,
    /// Instance ids are object index + 1.
    pub labels: LabelImage,
    pub objects: Vec<FrameObject>,
}

/// A detection with the id of the object that caused it.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub object: usize,
    pub pose: Pose4DoF,
    pub record: DetectionRecord,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub shape_space: ShapeSpace,
    pub ego: EgoTrajectory,
    pub objects: Vec<ObjectTruth>,
    pub frames: Vec<FrameTruth>,
}

fn ego_trajectory(cfg: &ScenarioConfig) -> EgoTrajectory {
    let dt = 1.0 / cfg.frame_rate;
    let mut yaw: f64 = 0.0;
    let mut position = Vec3::zeros();
    let mut poses = Vec::with_capacity(cfg.frame_count);
    for _ in 0..cfg.frame_count {
        poses.push(RigidTransform::from_yaw(yaw, position));
        position += yaw_rotation(yaw) * Vec3::new(0.0, 0.0, cfg.ego.speed * dt);
        yaw += cfg.ego.yaw_rate * dt;
    }
    EgoTrajectory::new(poses)
}

fn car_path(spec: &CarSpec, frames: usize, frame_rate: f64, height: f64) -> Vec<Pose4DoF> {
    let dt = 1.0 / frame_rate;
    let mut yaw = spec.heading;
    let mut position = Vec3::new(spec.start[0], height, spec.start[1]);
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        out.push(Pose4DoF::new(position, yaw));
        position += heading_vector(yaw) * spec.speed * dt;
        if let Some(turn) = spec.turn {
            if (turn.start_frame..turn.end_frame).contains(&f) {
                yaw = wrap_angle(yaw + turn.rate * dt);
            }
        }
    }
    out
}

/// Whether the segment from the origin to `p` passes through the box
/// (excluding a small neighbourhood of `p`).
fn segment_hits_box(p: &Vec3, pose: &Pose4DoF, shape_center: &Vec3, half: &Vec3) -> bool {
    let inv = pose.transform().inverse();
    let o = inv.apply(&Vec3::zeros()) - shape_center;
    let d = inv.apply(p) - shape_center - o;
    let (mut t0, mut t1): (f64, f64) = (0.0, 1.0 - 1e-3);
    for axis in 0..3 {
        if d[axis].abs() < 1e-12 {
            if o[axis].abs() > half[axis] {
                return false;
            }
            continue;
        }
        let a = (-half[axis] - o[axis]) / d[axis];
        let b = (half[axis] - o[axis]) / d[axis];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
        if t0 > t1 {
            return false;
        }
    }
    true
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], *p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

/// Inside a counter-clockwise convex polygon grown by `margin`.
fn in_convex(hull: &[[f64; 2]], p: [f64; 2], margin: f64) -> bool {
    let n = hull.len();
    (0..n).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        len == 0.0 || ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])) / len >= -margin
    })
}

/// Projected outline of a box's corners in front of the camera.
pub fn box_outline(b: &Box3D, k: &CameraIntrinsics) -> Vec<[f64; 2]> {
    let pts: Vec<[f64; 2]> = b
        .corners()
        .iter()
        .filter(|c| c.z > 0.1)
        .map(|c| [k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy])
        .collect();
    convex_hull(pts)
}

impl Scenario {
    pub fn generate(config: ScenarioConfig) -> Result<Self, ScenarioError> {
        config.validate()?;
        let template = CarTemplate::new(config.shape.point_count);
        let models = sample_car_models(&template, config.shape.model_count, config.shape.seed);
        let shape_space = build_shape_space(&models, config.shape.latent_dim)?.space;
        let ego = ego_trajectory(&config);

        let mut objects = Vec::with_capacity(config.cars.len());
        for spec in &config.cars {
            let code = shape_space.encode(&template.points(&spec.params))?;
            let shape = shape_space.decode(&code)?;
            let geometry = BoxGeometry::of_shape(&shape, config.ground_clearance);
            let height = config.camera_height - geometry.bottom.y;
            objects.push(ObjectTruth {
                state: spec.state,
                shape_code: code,
                shape,
                geometry,
                global_poses: car_path(spec, config.frame_count, config.frame_rate, height),
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut frames = Vec::with_capacity(config.frame_count);
        for f in 0..config.frame_count {
            frames.push(simulate_frame(&config, &ego, &objects, f, &mut rng));
        }
        Ok(Self {
            config,
            shape_space,
            ego,
            objects,
            frames,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Ground-truth boxes per frame.
    pub fn ground_truth(&self) -> Vec<Vec<Box3D>> {
        self.frames
            .iter()
            .map(|f| f.objects.iter().map(|o| o.boxed).collect())
            .collect()
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            intrinsics: self.config.intrinsics,
            velo_to_cam: kitti_velo_to_cam(),
            imu_to_velo: None,
        }
    }

    /// Noisy detections of the labeled objects. `stream` selects an
    /// independent random stream (one per iteration).
    pub fn detections(&self, noise: &DetectionNoise, stream: u64) -> Vec<Vec<Detection>> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.config.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
        let normal = |s: f64| Normal::new(0.0, s).expect("non-negative sigma");
        let (nt, nyaw) = (normal(noise.sigma_t), normal(noise.sigma_yaw));
        self.frames
            .iter()
            .map(|frame| {
                let mut out = Vec::new();
                for fo in &frame.objects {
                    let miss = rng.random::<f64>() < noise.false_negative_rate;
                    let offset = Vec3::new(nt.sample(&mut rng), nt.sample(&mut rng), nt.sample(&mut rng));
                    let dyaw = nyaw.sample(&mut rng);
                    let score = rng.random_range(0.3..1.0);
                    if miss {
                        continue;
                    }
                    let obj = &self.objects[fo.object];
                    let pose = Pose4DoF::new(fo.pose.translation + offset, fo.pose.yaw() + dyaw);
                    out.push(Detection {
                        object: fo.object,
                        pose,
                        record: DetectionRecord {
                            boxed: obj.geometry.to_box(&pose, score),
                            shape_code: obj.shape_code.clone(),
                        },
                    });
                }
                out
            })
            .collect()
    }

    /// Writes the sequence directory the pipeline reads, with one
    /// detection set per iteration (`detections/`, then `detections_2/`, …).
    pub fn write_sequence(&self, dir: &Path, iterations: usize) -> Result<(), ScenarioError> {
        let calib = self.calibration();
        let cam_to_velo = calib.velo_to_cam.inverse();
        io::write_text(&dir.join("calib.txt"), &calib.to_text())?;
        io::write_text(&dir.join("poses.txt"), &self.ego.to_text())?;
        let space_path = dir.join("shape_space.bin");
        self.shape_space.save(&space_path).map_err(|e| match e {
            ShapeError::Io(source) => ScenarioError::Io(IoError::Io {
                path: space_path.clone(),
                source,
            }),
            other => ScenarioError::Shape(other),
        })?;
        for (f, frame) in self.frames.iter().enumerate() {
            let velo: Vec<Vec3> = frame.scan.iter().map(|p| cam_to_velo.apply(p)).collect();
            io::write_velodyne(&io::frame_file(&dir.join("velodyne"), f, "bin"), &velo)?;
            io::write_label_image(&io::frame_file(&dir.join("masks"), f, "pgm"), &frame.labels)?;
            let gt: Vec<Box3D> = frame.objects.iter().map(|o| o.boxed).collect();
            io::write_labels(&io::frame_file(&dir.join("label_gt"), f, "txt"), &gt)?;
        }
        for iteration in 1..=iterations.max(1) {
            let noise = detection_provider(iteration, &self.config.noise, self.config.schedule);
            let name = if iteration == 1 {
                "detections".to_string()
            } else {
                format!("detections_{iteration}")
            };
            for (f, dets) in self.detections(&noise, iteration as u64).iter().enumerate() {
                let records: Vec<DetectionRecord> = dets.iter().map(|d| d.record.clone()).collect();
                io::write_text(
                    &io::frame_file(&dir.join(&name), f, "txt"),
                    &io::format_detections(&records),
                )?;
            }
        }
        Ok(())
    }
}

fn simulate_frame(
    cfg: &ScenarioConfig,
    ego: &EgoTrajectory,
    objects: &[ObjectTruth],
    frame: usize,
    rng: &mut ChaCha8Rng,
) -> FrameTruth {
    let ego_pose = ego.pose(frame).expect("frame within trajectory");
    let local: Vec<Pose4DoF> = objects
        .iter()
        .map(|o| {
            let g = o.global_poses[frame];
            let yaw = to_local_yaw(g.yaw(), ego_pose).expect("vertical-axis ego rotation");
            Pose4DoF::new(to_local_translation(&g.translation, ego_pose), yaw)
        })
        .collect();
    let bounds: Vec<(Vec3, Vec3)> = objects
        .iter()
        .map(|o| {
            let (c, s) = crate::shapespace::bounding_box(&o.shape);
            (c, s / 2.0)
        })
        .collect();

    let lidar = &cfg.lidar;
    let noise = Normal::new(0.0, lidar.noise_sigma).expect("non-negative sigma");
    let mut scan = Vec::new();
    let mut visible_counts = vec![0usize; objects.len()];
    for (i, obj) in objects.iter().enumerate() {
        let pose = &local[i];
        if pose.translation.norm() > lidar.max_range + 5.0 {
            continue;
        }
        let t = pose.transform();
        let posed: Vec<Vec3> = obj.shape.iter().map(|p| t.apply(p)).collect();
        let visible = visible_from_origin(&posed, &VisibilityParams::default());
        for (p, seen) in posed.iter().zip(visible) {
            if !seen || p.z <= 0.0 || p.norm() > lidar.max_range {
                continue;
            }
            if lidar.occlusion
                && (0..objects.len()).any(|j| j != i && segment_hits_box(p, &local[j], &bounds[j].0, &bounds[j].1))
            {
                continue;
            }
            visible_counts[i] += 1;
            let keep = if lidar.density_range > 0.0 {
                (lidar.density_range / p.norm()).powi(2).min(1.0)
            } else {
                1.0
            };
            if rng.random::<f64>() >= keep || rng.random::<f64>() < lidar.dropout {
                continue;
            }
            scan.push(p + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng)));
        }
    }
    for _ in 0..lidar.ground_points {
        let x = rng.random_range(-25.0..25.0);
        let z = rng.random_range(1.0..lidar.max_range.min(60.0));
        scan.push(Vec3::new(x, cfg.camera_height, z) + Vec3::new(0.0, noise.sample(rng), 0.0));
    }

    let k = &cfg.intrinsics;
    let mut labeled: Vec<FrameObject> = Vec::new();
    for (i, obj) in objects.iter().enumerate() {
        let pose = local[i];
        let boxed = obj.geometry.to_box(&pose, 1.0);
        let center = pose
            .transform()
            .apply(&(obj.geometry.bottom - Vec3::new(0.0, obj.geometry.height / 2.0, 0.0)));
        if center.z <= 1.0
            || center.norm() > cfg.max_label_range
            || !k.project(&center).valid
            || visible_counts[i] < cfg.min_label_points
        {
            continue;
        }
        labeled.push(FrameObject {
            object: i,
            pose,
            boxed,
            visible_points: visible_counts[i],
        });
    }

    let w = (k.image_width as f64 * cfg.mask_scale).round() as u32;
    let h = (k.image_height as f64 * cfg.mask_scale).round() as u32;
    let mut labels = LabelImage::new(w, h, cfg.mask_scale);
    let mut order: Vec<&FrameObject> = labeled.iter().collect();
    order.sort_by(|a, b| b.pose.translation.norm().total_cmp(&a.pose.translation.norm()));
    let margin = 0.75 / cfg.mask_scale;
    for fo in order {
        let hull = box_outline(&fo.boxed, k);
        if hull.len() < 3 {
            continue;
        }
        let (u0, u1) = hull
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p[0]), h.max(p[0])));
        let (v0, v1) = hull
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p[1]), h.max(p[1])));
        let col0 = ((u0 - margin) * cfg.mask_scale).floor().max(0.0) as usize;
        let col1 = (((u1 + margin) * cfg.mask_scale).ceil().max(0.0) as usize).min(w as usize);
        let row0 = ((v0 - margin) * cfg.mask_scale).floor().max(0.0) as usize;
        let row1 = (((v1 + margin) * cfg.mask_scale).ceil().max(0.0) as usize).min(h as usize);
        for row in row0..row1 {
            for col in col0..col1 {
                let p = [(col as f64 + 0.5) / cfg.mask_scale, (row as f64 + 0.5) / cfg.mask_scale];
                if in_convex(&hull, p, margin) {
                    labels.ids[row * w as usize + col] = (fo.object + 1) as u8;
                }
            }
        }
    }
    FrameTruth {
        scan,
        labels,
        objects: labeled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::to_global_translation;
    use crate::kdtree::KdTree;
    use crate::motion::{classify_motion, GlobalTrack, MotionParams};

    fn small(seed: u64) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::urban(seed);
        cfg.frame_count = 20;
        cfg.shape.point_count = 256;
        cfg
    }

    #[test]
    fn provider_cases() {
        let base = DetectionNoise {
            sigma_t: 0.4,
            sigma_yaw: 0.2,
            false_negative_rate: 0.5,
        };
        assert_eq!(detection_provider(1, &base, NoiseSchedule::Halving), base);
        let third = detection_provider(3, &base, NoiseSchedule::Halving);
        assert!((third.sigma_t - 0.1).abs() < 1e-15);
        assert!((third.false_negative_rate - 0.5 * 0.49).abs() < 1e-15);
        for k in 1..5 {
            assert_eq!(detection_provider(k, &base, NoiseSchedule::Constant), base);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(1);
        cfg.frame_rate = 5.0;
        assert!(matches!(Scenario::generate(cfg), Err(ScenarioError::ConfigInvalid(_))));
        let mut cfg = small(1);
        cfg.cars[0].speed = 3.0;
        assert!(matches!(Scenario::generate(cfg), Err(ScenarioError::ConfigInvalid(_))));
    }

    #[test]
    fn noiseless_detections_equal_truth() {
        let mut cfg = small(2);
        cfg.noise = DetectionNoise::none();
        let s = Scenario::generate(cfg).unwrap();
        let dets = s.detections(&DetectionNoise::none(), 1);
        for (frame, d) in s.frames.iter().zip(&dets) {
            assert_eq!(frame.objects.len(), d.len());
            for (fo, det) in frame.objects.iter().zip(d) {
                assert_eq!(det.pose, fo.pose);
                assert_eq!(det.record.boxed.center, fo.boxed.center);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Scenario::generate(small(3)).unwrap();
        let b = Scenario::generate(small(3)).unwrap();
        assert_eq!(a.frames, b.frames);
        let noise = a.config.noise;
        assert_eq!(a.detections(&noise, 2), b.detections(&noise, 2));
        assert_ne!(a.detections(&noise, 1), a.detections(&noise, 2));
    }

    #[test]
    fn detection_rmse_matches_sigma() {
        let s = Scenario::generate(small(4)).unwrap();
        let noise = DetectionNoise {
            sigma_t: 0.3,
            sigma_yaw: 0.0,
            false_negative_rate: 0.0,
        };
        let mut sum = 0.0;
        let mut n = 0;
        for stream in 0..10 {
            for (frame, dets) in s.frames.iter().zip(s.detections(&noise, stream)) {
                for (fo, d) in frame.objects.iter().zip(dets) {
                    sum += (d.pose.translation - fo.pose.translation).norm_squared();
                    n += 1;
                }
            }
        }
        assert!(n >= 500, "{n} samples");
        let rmse = (sum / n as f64).sqrt();
        let expect = 0.3 * 3f64.sqrt();
        assert!((rmse - expect).abs() < 0.1 * expect, "{rmse}");
    }

    #[test]
    fn lidar_points_lie_on_cars_or_ground() {
        let mut cfg = small(5);
        cfg.lidar.noise_sigma = 0.0;
        let s = Scenario::generate(cfg).unwrap();
        for (f, frame) in s.frames.iter().enumerate().step_by(5) {
            let surfaces: Vec<Vec3> = s
                .objects
                .iter()
                .flat_map(|o| {
                    let g = o.global_poses[f];
                    let ego = s.ego.pose(f).unwrap();
                    let local = Pose4DoF::new(
                        to_local_translation(&g.translation, ego),
                        to_local_yaw(g.yaw(), ego).unwrap(),
                    );
                    let t = local.transform();
                    o.shape.iter().map(move |p| t.apply(p)).collect::<Vec<_>>()
                })
                .collect();
            let tree = KdTree::build(&surfaces);
            for p in &frame.scan {
                let on_ground = (p.y - s.config.camera_height).abs() < 1e-9;
                let on_car = tree.nearest(p).unwrap().1.sqrt() < 1e-6;
                assert!(on_ground || on_car, "{p:?}");
            }
        }
    }

    #[test]
    fn truth_states_agree_with_classifier() {
        let s = Scenario::generate(ScenarioConfig::urban(6)).unwrap();
        for obj in &s.objects {
            let positions: Vec<Vec3> = obj.global_poses.iter().map(|p| p.translation).collect();
            let track = GlobalTrack::from_samples(
                (0..positions.len()).collect(),
                positions,
                obj.global_poses.iter().map(|p| Some(p.yaw())).collect(),
                s.config.frame_rate,
            );
            assert_eq!(classify_motion(&track, &MotionParams::default()), obj.state);
        }
    }

    #[test]
    fn masks_cover_their_objects() {
        let s = Scenario::generate(small(7)).unwrap();
        let k = s.config.intrinsics;
        let frame = &s.frames[0];
        assert!(!frame.objects.is_empty());
        for fo in &frame.objects {
            let c = fo.boxed.center - Vec3::new(0.0, fo.boxed.height / 2.0, 0.0);
            let p = k.project(&c);
            let id = frame.labels.at(p.u, p.v);
            assert!(id != 0);
        }
        // a parked car stays put in the world frame
        let obj = &s.objects[0];
        let ego = &s.ego;
        let g0 = to_global_translation(&frame.objects[0].pose.translation, ego.pose(0).unwrap());
        assert!((g0 - s.objects[frame.objects[0].object].global_poses[0].translation).norm() < 1e-9);
        assert_eq!(obj.global_poses[0], obj.global_poses[10]);
    }

    #[test]
    fn sequence_directory_round_trips() {
        let s = Scenario::generate(small(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.write_sequence(dir.path(), 2).unwrap();
        let calib = Calibration::read(&dir.path().join("calib.txt")).unwrap();
        assert_eq!(calib.intrinsics, s.config.intrinsics);
        let velo = io::read_velodyne(&io::frame_file(&dir.path().join("velodyne"), 3, "bin")).unwrap();
        assert_eq!(velo.len(), s.frames[3].scan.len());
        let back = calib.velo_to_cam.apply(&velo[0]);
        assert!((back - s.frames[3].scan[0]).norm() < 1e-4);
        let gt = io::read_labels(&io::frame_file(&dir.path().join("label_gt"), 3, "txt")).unwrap();
        assert_eq!(gt, s.ground_truth()[3]);
        assert!(dir.path().join("detections_2").is_dir());
        let labels = io::read_label_image(&io::frame_file(&dir.path().join("masks"), 3, "pgm"), 1242).unwrap();
        assert_eq!(labels, s.frames[3].labels);
    }
}
