//! Per-observation pose refinement against the lidar scan and the
//! temporal target of its tracklet, plus propagation of static poses into
//! frames without detections.

use thiserror::Error;

use crate::chamfer::{
    chamfer_gradient, visible_shape_points, ChamferError, ChamferMode, IndexedScan, VisibilityParams,
};
use crate::geometry::{
    to_local_translation, to_local_yaw, wrap_angle, CameraIntrinsics, EgoTrajectory, Pose4DoF, Vec3,
};
use crate::motion::TemporalTarget;
use crate::tracker::{MotionState, ObjectObservation, Tracklet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("observation has neither lidar points nor a temporal target")]
    NoSignal,
    #[error("invalid refinement config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Chamfer(#[from] ChamferError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementConfig {
    pub lambda_t: f64,
    pub lambda_r: f64,
    pub steps: usize,
    /// Largest translation change per axis in one step (meters).
    pub step_size_translation: f64,
    /// Largest yaw change in one step (radians).
    pub step_size_yaw: f64,
    pub max_halvings: usize,
    pub chamfer_mode: ChamferMode,
    /// Restricts the model to the points facing the sensor; `None` matches
    /// the whole model surface.
    pub visibility: Option<VisibilityParams>,
    /// Steps between recomputations of the visible model points; 0 keeps
    /// the set chosen at the initial pose.
    pub visibility_refresh: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            lambda_t: 0.25,
            lambda_r: 2.0,
            steps: 100,
            step_size_translation: 0.02,
            step_size_yaw: 0.01,
            max_halvings: 5,
            chamfer_mode: ChamferMode::Sum,
            visibility: Some(VisibilityParams::default()),
            visibility_refresh: 25,
        }
    }
}

impl RefinementConfig {
    /// Same settings with the temporal terms switched off.
    pub fn chamfer_only(&self) -> Self {
        Self {
            lambda_t: 0.0,
            lambda_r: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.lambda_t >= 0.0 && self.lambda_r >= 0.0) {
            return Err(RefineError::InvalidConfig("lambdas must be non-negative"));
        }
        if !(self.step_size_translation > 0.0 && self.step_size_yaw > 0.0) {
            return Err(RefineError::InvalidConfig("step sizes must be positive"));
        }
        Ok(())
    }
}

/// The temporal target an observation is pulled toward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetRef<'a> {
    pub state: MotionState,
    pub target: Option<&'a TemporalTarget>,
}

impl<'a> TargetRef<'a> {
    pub fn none() -> Self {
        Self {
            state: MotionState::Undecided,
            target: None,
        }
    }

    pub fn new(state: MotionState, target: &'a TemporalTarget) -> Self {
        Self {
            state,
            target: Some(target),
        }
    }

    fn active(&self) -> Option<&'a TemporalTarget> {
        match self.state {
            MotionState::Undecided => None,
            _ => self.target,
        }
    }
}

/// Total loss with its analytic gradient and a diagonal curvature estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub d_translation: Vec3,
    pub d_yaw: f64,
    pub curvature_translation: f64,
    pub curvature_yaw: f64,
}

/// Chamfer term (zero without a scan) plus the temporal term of the
/// observation's motion state.
pub fn loss(
    pose: &Pose4DoF,
    shape: &[Vec3],
    scan: Option<&IndexedScan>,
    target: TargetRef<'_>,
    cfg: &RefinementConfig,
) -> Result<LossGradient, RefineError> {
    let scan = scan.filter(|s| !s.is_empty() && !shape.is_empty());
    let temporal = target.active();
    if scan.is_none() && temporal.is_none() {
        return Err(RefineError::NoSignal);
    }
    let mut out = match scan {
        Some(scan) => {
            let g = chamfer_gradient(shape, pose, scan, cfg.chamfer_mode)?;
            LossGradient {
                loss: g.loss,
                d_translation: g.d_translation,
                d_yaw: g.d_yaw,
                curvature_translation: g.curvature_translation,
                curvature_yaw: g.curvature_yaw,
            }
        }
        None => LossGradient {
            loss: 0.0,
            d_translation: Vec3::zeros(),
            d_yaw: 0.0,
            curvature_translation: 0.0,
            curvature_yaw: 0.0,
        },
    };
    if let Some(t) = temporal {
        let dt = pose.translation - t.translation;
        let dyaw = wrap_angle(pose.yaw() - t.yaw);
        out.loss += cfg.lambda_t * dt.norm_squared() + cfg.lambda_r * dyaw * dyaw;
        out.d_translation += 2.0 * cfg.lambda_t * dt;
        out.d_yaw += 2.0 * cfg.lambda_r * dyaw;
        out.curvature_translation += 2.0 * cfg.lambda_t;
        out.curvature_yaw += 2.0 * cfg.lambda_r;
    }
    Ok(out)
}

fn scaled_step(g: f64, h: f64, cap: f64) -> f64 {
    if g == 0.0 {
        return 0.0;
    }
    let newton = if h > 0.0 { -g / h } else { -g.signum() * cap };
    newton.clamp(-cap, cap)
}

/// Descends the total loss for `cfg.steps` iterations.
///
/// Each step is the curvature-scaled gradient step clipped to the per-parameter
/// step sizes. A step that increases the loss is halved up to
/// `cfg.max_halvings` times; if none is accepted the stage ends. With
/// visibility enabled the visible model points are re-selected at the start
/// of every stage of `cfg.visibility_refresh` steps.
pub fn refine_pose(
    initial: &Pose4DoF,
    shape: &[Vec3],
    scan: Option<&IndexedScan>,
    target: TargetRef<'_>,
    cfg: &RefinementConfig,
) -> Result<Pose4DoF, RefineError> {
    cfg.validate()?;
    let mut pose = *initial;
    let mut step = 0;
    while step < cfg.steps {
        let stage_len = match cfg.visibility_refresh {
            0 => cfg.steps - step,
            n => n.min(cfg.steps - step),
        };
        let visible;
        let model = match (cfg.visibility, scan) {
            (Some(params), Some(_)) => {
                visible = visible_shape_points(shape, &pose, &params);
                if visible.is_empty() {
                    shape
                } else {
                    &visible[..]
                }
            }
            _ => shape,
        };
        let (next, taken) = descend(&pose, model, scan, target, cfg, stage_len)?;
        pose = next;
        step += stage_len;
        if taken == 0 {
            break;
        }
    }
    Ok(pose)
}

/// Runs up to `steps` descent steps on a fixed model; returns the pose and
/// the number of accepted steps.
fn descend(
    initial: &Pose4DoF,
    shape: &[Vec3],
    scan: Option<&IndexedScan>,
    target: TargetRef<'_>,
    cfg: &RefinementConfig,
    steps: usize,
) -> Result<(Pose4DoF, usize), RefineError> {
    let mut pose = *initial;
    let mut current = loss(&pose, shape, scan, target, cfg)?;
    for taken in 0..steps {
        let mut dt = Vec3::new(
            scaled_step(
                current.d_translation.x,
                current.curvature_translation,
                cfg.step_size_translation,
            ),
            scaled_step(
                current.d_translation.y,
                current.curvature_translation,
                cfg.step_size_translation,
            ),
            scaled_step(
                current.d_translation.z,
                current.curvature_translation,
                cfg.step_size_translation,
            ),
        );
        let mut dyaw = scaled_step(current.d_yaw, current.curvature_yaw, cfg.step_size_yaw);
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            if dt == Vec3::zeros() && dyaw == 0.0 {
                break;
            }
            let candidate = Pose4DoF::new(pose.translation + dt, pose.yaw() + dyaw);
            let next = loss(&candidate, shape, scan, target, cfg)?;
            if next.loss <= current.loss {
                accepted = Some((candidate, next));
                break;
            }
            dt *= 0.5;
            dyaw *= 0.5;
        }
        match accepted {
            Some((p, l)) => {
                pose = p;
                current = l;
            }
            None => return Ok((pose, taken)),
        }
    }
    Ok((pose, steps))
}

/// Refines the pose of one observation; the shape code and every other
/// field pass through unchanged.
pub fn refine_observation(
    obs: &ObjectObservation,
    shape: &[Vec3],
    scan: Option<&IndexedScan>,
    target: TargetRef<'_>,
    cfg: &RefinementConfig,
) -> Result<ObjectObservation, RefineError> {
    let pose = refine_pose(&obs.pose, shape, scan, target, cfg)?;
    Ok(ObjectObservation { pose, ..obs.clone() })
}

/// Confidence given to poses propagated into undetected frames.
pub const PROPAGATED_CONFIDENCE: f64 = 0.5;
const MIN_PROPAGATION_DEPTH: f64 = 0.5;

/// Copies a static object's refined world pose into the frames of its span
/// that have no detection, when the object is in front of the camera and
/// projects inside the image.
pub fn propagate_static(
    tracklet: &Tracklet,
    global_translation: &Vec3,
    global_yaw: f64,
    ego: &EgoTrajectory,
    intrinsics: &CameraIntrinsics,
) -> Vec<ObjectObservation> {
    let (Some(first), Some(last)) = (tracklet.first_frame(), tracklet.last_frame()) else {
        return Vec::new();
    };
    let Some(template) = tracklet.observations.iter().max_by(|a, b| {
        a.confidence
            .total_cmp(&b.confidence)
            .then(b.frame_index.cmp(&a.frame_index))
    }) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut observed = tracklet.observations.iter().map(|o| o.frame_index).peekable();
    for frame in first..=last {
        if observed.next_if_eq(&frame).is_some() {
            continue;
        }
        let Some(ego_pose) = ego.pose(frame) else {
            continue;
        };
        let t = to_local_translation(global_translation, ego_pose);
        if t.z <= MIN_PROPAGATION_DEPTH || !intrinsics.project(&t).valid {
            continue;
        }
        let Ok(yaw) = to_local_yaw(global_yaw, ego_pose) else {
            continue;
        };
        out.push(ObjectObservation {
            frame_index: frame,
            pose: Pose4DoF::new(t, yaw),
            shape_code: template.shape_code.clone(),
            confidence: PROPAGATED_CONFIDENCE,
            detected: false,
        });
    }
    out
}
