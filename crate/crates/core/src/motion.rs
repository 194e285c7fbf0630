//! Motion-state classification of tracklets and the temporal targets used
//! to regularize their poses.
//!
//! Everything here works in the global frame (the first camera frame of the
//! sequence), on its horizontal plane spanned by the x and z axes. Targets
//! are handed back in each observation's local frame.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{
    to_global_translation, to_global_yaw, to_local_translation, to_local_yaw, wrap_angle, yaw_of_direction,
    EgoTrajectory, GeometryError, Vec3,
};
use crate::tracker::{MotionState, Tracklet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("velocity profile needs at least 2 observations")]
    TooShort,
    #[error("no observation has a usable heading")]
    NoValidYaw,
    #[error("all points lie within the inlier threshold of one point")]
    Degenerate,
    #[error("frame {0} has no ego pose")]
    MissingEgoPose(usize),
    #[error("timestamps must be strictly increasing")]
    NonIncreasingTime,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A tracklet expressed in the global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTrack {
    pub frames: Vec<usize>,
    pub positions: Vec<Vec3>,
    /// `None` where the heading is degenerate in the global frame.
    pub yaws: Vec<Option<f64>>,
    pub timestamps: Vec<f64>,
}

impl GlobalTrack {
    pub fn from_tracklet(tracklet: &Tracklet, ego: &EgoTrajectory, frame_rate: f64) -> Result<Self, MotionError> {
        let mut track = GlobalTrack {
            frames: Vec::with_capacity(tracklet.len()),
            positions: Vec::with_capacity(tracklet.len()),
            yaws: Vec::with_capacity(tracklet.len()),
            timestamps: Vec::with_capacity(tracklet.len()),
        };
        for obs in &tracklet.observations {
            let pose = ego
                .pose(obs.frame_index)
                .ok_or(MotionError::MissingEgoPose(obs.frame_index))?;
            track.frames.push(obs.frame_index);
            track.positions.push(to_global_translation(&obs.pose.translation, pose));
            track.yaws.push(to_global_yaw(obs.pose.yaw(), pose).ok());
            track.timestamps.push(obs.frame_index as f64 / frame_rate);
        }
        if track.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MotionError::NonIncreasingTime);
        }
        Ok(track)
    }

    /// Builds a track directly from global samples (one per frame index).
    pub fn from_samples(frames: Vec<usize>, positions: Vec<Vec3>, yaws: Vec<Option<f64>>, frame_rate: f64) -> Self {
        let timestamps = frames.iter().map(|f| *f as f64 / frame_rate).collect();
        Self {
            frames,
            positions,
            yaws,
            timestamps,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The same track after a rigid motion of the world frame.
    pub fn moved_by(&self, g: &crate::geometry::RigidTransform) -> Self {
        Self {
            frames: self.frames.clone(),
            positions: self.positions.iter().map(|p| g.apply(p)).collect(),
            yaws: self
                .yaws
                .iter()
                .map(|y| y.and_then(|y| to_global_yaw(y, g).ok()))
                .collect(),
            timestamps: self.timestamps.clone(),
        }
    }
}

/// Signed velocities along the global x and z axes, one sample per
/// consecutive observation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityProfile {
    pub vx: Vec<f64>,
    pub vz: Vec<f64>,
    pub dt: Vec<f64>,
}

impl VelocityProfile {
    pub fn len(&self) -> usize {
        self.vx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vx.is_empty()
    }

    /// Net signed displacement per axis.
    pub fn displacement(&self) -> (f64, f64) {
        let dx = self.vx.iter().zip(&self.dt).map(|(v, t)| v * t).sum();
        let dz = self.vz.iter().zip(&self.dt).map(|(v, t)| v * t).sum();
        (dx, dz)
    }
}

pub fn velocity_profile(track: &GlobalTrack) -> Result<VelocityProfile, MotionError> {
    if track.len() < 2 {
        return Err(MotionError::TooShort);
    }
    let mut profile = VelocityProfile {
        vx: Vec::with_capacity(track.len() - 1),
        vz: Vec::with_capacity(track.len() - 1),
        dt: Vec::with_capacity(track.len() - 1),
    };
    for k in 0..track.len() - 1 {
        let dt = track.timestamps[k + 1] - track.timestamps[k];
        if dt <= 0.0 {
            return Err(MotionError::NonIncreasingTime);
        }
        let d = track.positions[k + 1] - track.positions[k];
        profile.vx.push(d.x / dt);
        profile.vz.push(d.z / dt);
        profile.dt.push(dt);
    }
    Ok(profile)
}

/// How the distance threshold is applied to the net displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    /// Euclidean norm of the per-axis displacements.
    #[default]
    Combined,
    /// Both axes must stay below the threshold on their own.
    PerAxis,
}

/// Which velocity signal is scanned for zero-crossings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossingAxis {
    /// Velocity projected on the net displacement direction.
    #[default]
    Dominant,
    /// A step counts if either horizontal axis changes sign.
    EitherAxis,
}

/// Denominator of the zero-crossing ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossingDenominator {
    /// Number of velocity samples minus one (pairs that can cross).
    #[default]
    VelocityPairs,
    /// Number of observations.
    Observations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    pub min_frames: usize,
    pub distance_threshold: f64,
    pub zero_crossing_ratio: f64,
    /// Velocities below this magnitude (m/s) count as zero and are skipped.
    pub deadband: f64,
    pub distance_mode: DistanceMode,
    pub crossing_axis: CrossingAxis,
    pub crossing_denominator: CrossingDenominator,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            min_frames: 6,
            distance_threshold: 3.0,
            zero_crossing_ratio: 0.40,
            deadband: 0.05,
            distance_mode: DistanceMode::Combined,
            crossing_axis: CrossingAxis::Dominant,
            crossing_denominator: CrossingDenominator::VelocityPairs,
        }
    }
}

fn crosses(a: f64, b: f64, deadband: f64) -> bool {
    a.abs() >= deadband && b.abs() >= deadband && (a > 0.0) != (b > 0.0)
}

/// Fraction of velocity steps with a sign change.
pub fn zero_crossing_ratio(profile: &VelocityProfile, params: &MotionParams) -> f64 {
    let n = profile.len();
    if n < 2 {
        return 0.0;
    }
    let events = match params.crossing_axis {
        CrossingAxis::EitherAxis => (0..n - 1)
            .filter(|&k| {
                crosses(profile.vx[k], profile.vx[k + 1], params.deadband)
                    || crosses(profile.vz[k], profile.vz[k + 1], params.deadband)
            })
            .count(),
        CrossingAxis::Dominant => {
            let (dx, dz) = profile.displacement();
            let norm = dx.hypot(dz);
            let (ux, uz) = if norm > 0.0 { (dx / norm, dz / norm) } else { (1.0, 0.0) };
            let along: Vec<f64> = profile
                .vx
                .iter()
                .zip(&profile.vz)
                .map(|(vx, vz)| vx * ux + vz * uz)
                .collect();
            along
                .windows(2)
                .filter(|w| crosses(w[0], w[1], params.deadband))
                .count()
        }
    };
    let denominator = match params.crossing_denominator {
        CrossingDenominator::VelocityPairs => n - 1,
        CrossingDenominator::Observations => n + 1,
    };
    events as f64 / denominator as f64
}

/// Static / Moving / Undecided from the net displacement and, for tracks
/// that travel farther than the threshold, the zero-crossing rate.
pub fn classify_motion(track: &GlobalTrack, params: &MotionParams) -> MotionState {
    if track.len() < params.min_frames.max(2) {
        return MotionState::Undecided;
    }
    let Ok(profile) = velocity_profile(track) else {
        return MotionState::Undecided;
    };
    let (dx, dz) = profile.displacement();
    let short = match params.distance_mode {
        DistanceMode::Combined => dx.hypot(dz) < params.distance_threshold,
        DistanceMode::PerAxis => dx.abs() < params.distance_threshold && dz.abs() < params.distance_threshold,
    };
    if short {
        return MotionState::Static;
    }
    if zero_crossing_ratio(&profile, params) >= params.zero_crossing_ratio {
        MotionState::Static
    } else {
        MotionState::Moving
    }
}

/// A pose target for one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalTarget {
    /// Local-frame translation target.
    pub translation: Vec3,
    /// Local-frame yaw target.
    pub yaw: f64,
    pub global_translation: Vec3,
    pub global_yaw: f64,
}

/// Per-observation targets of one tracklet; empty when `Undecided`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalTargets {
    pub state: MotionState,
    pub targets: Vec<TemporalTarget>,
}

impl TemporalTargets {
    pub fn undecided() -> Self {
        Self {
            state: MotionState::Undecided,
            targets: Vec::new(),
        }
    }

    pub fn get(&self, index: usize) -> Option<&TemporalTarget> {
        self.targets.get(index)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-coordinate median of a set of positions.
pub fn median_position(positions: &[Vec3]) -> Vec3 {
    let mut out = Vec3::zeros();
    for axis in 0..3 {
        let mut v: Vec<f64> = positions.iter().map(|p| p[axis]).collect();
        out[axis] = median(&mut v);
    }
    out
}

/// Circular mean of the angles in the most populated of `bins` equal bins
/// over `[−π, π)`. Ties go to the lowest bin.
pub fn mode_bin_yaw(yaws: &[f64], bins: usize) -> Option<f64> {
    if yaws.is_empty() || bins == 0 {
        return None;
    }
    let width = 2.0 * PI / bins as f64;
    let bin_of = |y: f64| (((wrap_angle(y) + PI) / width).floor() as usize).min(bins - 1);
    let mut counts = vec![0usize; bins];
    for y in yaws {
        counts[bin_of(*y)] += 1;
    }
    let best = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)?;
    let (s, c) = yaws
        .iter()
        .filter(|y| bin_of(**y) == best)
        .fold((0.0, 0.0), |(s, c), y| (s + y.sin(), c + y.cos()));
    Some(wrap_angle(s.atan2(c)))
}

fn localize(
    frame: usize,
    global_translation: Vec3,
    global_yaw: f64,
    ego: &EgoTrajectory,
) -> Result<TemporalTarget, MotionError> {
    let pose = ego.pose(frame).ok_or(MotionError::MissingEgoPose(frame))?;
    Ok(TemporalTarget {
        translation: to_local_translation(&global_translation, pose),
        yaw: to_local_yaw(global_yaw, pose)?,
        global_translation,
        global_yaw,
    })
}

/// Targets for a parked car: the median world position and the mode-bin
/// world heading, projected back into each observation's frame.
pub fn static_targets(
    track: &GlobalTrack,
    ego: &EgoTrajectory,
    histogram_bins: usize,
) -> Result<TemporalTargets, MotionError> {
    let valid: Vec<f64> = track.yaws.iter().flatten().copied().collect();
    let yaw = mode_bin_yaw(&valid, histogram_bins).ok_or(MotionError::NoValidYaw)?;
    let position = median_position(&track.positions);
    let targets = track
        .frames
        .iter()
        .map(|f| localize(*f, position, yaw, ego))
        .collect::<Result<_, _>>()?;
    Ok(TemporalTargets {
        state: MotionState::Static,
        targets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub inlier_threshold: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.3,
            iterations: 100,
            seed: 0,
        }
    }
}

/// A 2D line `point + s·direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineFit {
    pub point: [f64; 2],
    pub direction: [f64; 2],
    pub inliers: Vec<bool>,
}

impl LineFit {
    pub fn distance(&self, p: &[f64; 2]) -> f64 {
        line_distance(&self.point, &self.direction, p)
    }

    pub fn project(&self, p: &[f64; 2]) -> [f64; 2] {
        let s = (p[0] - self.point[0]) * self.direction[0] + (p[1] - self.point[1]) * self.direction[1];
        [
            self.point[0] + s * self.direction[0],
            self.point[1] + s * self.direction[1],
        ]
    }
}

fn line_distance(point: &[f64; 2], dir: &[f64; 2], p: &[f64; 2]) -> f64 {
    ((p[0] - point[0]) * dir[1] - (p[1] - point[1]) * dir[0]).abs()
}

/// Total-least-squares line through a point set.
fn fit_tls(points: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    ([cx, cy], [theta.cos(), theta.sin()])
}

/// RANSAC line over sampled point pairs with a total-least-squares refit on
/// the best consensus set. Small inputs enumerate every pair instead of
/// sampling.
pub fn ransac_line(points: &[[f64; 2]], params: &RansacParams) -> Result<LineFit, MotionError> {
    assert!(params.inlier_threshold > 0.0, "inlier threshold must be positive");
    let n = points.len();
    if n < 2 {
        return Err(MotionError::TooShort);
    }
    let th = params.inlier_threshold;
    let within = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]) <= th;
    if points.iter().any(|c| points.iter().all(|p| within(c, p))) {
        return Err(MotionError::Degenerate);
    }

    let evaluate = |i: usize, j: usize| -> Option<(usize, [f64; 2], [f64; 2])> {
        let (a, b) = (points[i], points[j]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        if len < 1e-12 {
            return None;
        }
        let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let count = points.iter().filter(|p| line_distance(&a, &dir, p) <= th).count();
        Some((count, a, dir))
    };

    let mut best: Option<(usize, [f64; 2], [f64; 2])> = None;
    let mut consider = |cand: Option<(usize, [f64; 2], [f64; 2])>| {
        if let Some(c) = cand {
            if best.is_none_or(|b| c.0 > b.0) {
                best = Some(c);
            }
        }
    };
    let pair_count = n * (n - 1) / 2;
    if pair_count <= params.iterations {
        for i in 0..n {
            for j in i + 1..n {
                consider(evaluate(i, j));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        for _ in 0..params.iterations {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            consider(evaluate(i, j));
        }
    }
    let (_, a, dir) = best.ok_or(MotionError::Degenerate)?;
    let inliers: Vec<bool> = points.iter().map(|p| line_distance(&a, &dir, p) <= th).collect();
    let consensus: Vec<[f64; 2]> = points
        .iter()
        .zip(&inliers)
        .filter_map(|(p, keep)| keep.then_some(*p))
        .collect();
    let (point, direction) = if consensus.len() >= 2 {
        fit_tls(&consensus)
    } else {
        (a, dir)
    };
    Ok(LineFit {
        point,
        direction,
        inliers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovingParams {
    pub segment_length: usize,
    pub ransac: RansacParams,
    /// Bins of the heading histogram used when a segment falls back to
    /// median targets.
    pub histogram_bins: usize,
}

impl Default for MovingParams {
    fn default() -> Self {
        Self {
            segment_length: 10,
            ransac: RansacParams::default(),
            histogram_bins: 32,
        }
    }
}

/// Index ranges of consecutive segments; a short tail (fewer than 4
/// observations) is merged into the previous segment.
pub fn segment_ranges(len: usize, segment_length: usize) -> Vec<std::ops::Range<usize>> {
    let segment_length = segment_length.max(2);
    let mut ranges: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + segment_length).min(len);
        if end - start < 4 && !ranges.is_empty() {
            ranges.last_mut().unwrap().end = end;
        } else {
            ranges.push(start..end);
        }
        start = end;
    }
    ranges
}

/// Targets for a moving car from a piecewise-linear RANSAC trajectory.
pub fn moving_targets(
    track: &GlobalTrack,
    ego: &EgoTrajectory,
    params: &MovingParams,
) -> Result<TemporalTargets, MotionError> {
    if track.len() < 2 {
        return Err(MotionError::TooShort);
    }
    let mut targets = Vec::with_capacity(track.len());
    for (segment_index, range) in segment_ranges(track.len(), params.segment_length)
        .into_iter()
        .enumerate()
    {
        let positions = &track.positions[range.clone()];
        let frames = &track.frames[range.clone()];
        let mut heights: Vec<f64> = positions.iter().map(|p| p.y).collect();
        let height = median(&mut heights);
        let plane: Vec<[f64; 2]> = positions.iter().map(|p| [p.x, p.z]).collect();
        let ransac = RansacParams {
            seed: params.ransac.seed.wrapping_add(segment_index as u64),
            ..params.ransac
        };
        match ransac_line(&plane, &ransac) {
            Ok(line) => {
                let first = plane[0];
                let last = plane[plane.len() - 1];
                let mut dir = line.direction;
                if (last[0] - first[0]) * dir[0] + (last[1] - first[1]) * dir[1] < 0.0 {
                    dir = [-dir[0], -dir[1]];
                }
                let yaw = yaw_of_direction(&Vec3::new(dir[0], 0.0, dir[1])).ok_or(MotionError::Degenerate)?;
                for (p, f) in plane.iter().zip(frames) {
                    let q = line.project(p);
                    targets.push(localize(*f, Vec3::new(q[0], height, q[1]), yaw, ego)?);
                }
            }
            Err(MotionError::Degenerate) => {
                let valid: Vec<f64> = track.yaws[range.clone()].iter().flatten().copied().collect();
                let yaw = mode_bin_yaw(&valid, params.histogram_bins).ok_or(MotionError::NoValidYaw)?;
                let position = median_position(positions);
                for f in frames {
                    targets.push(localize(*f, position, yaw, ego)?);
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TemporalTargets {
        state: MotionState::Moving,
        targets,
    })
}

/// Single-segment variant of [`moving_targets`]: one robust line over the
/// whole track.
pub fn global_linear_targets(
    track: &GlobalTrack,
    ego: &EgoTrajectory,
    params: &MovingParams,
) -> Result<TemporalTargets, MotionError> {
    let whole = MovingParams {
        segment_length: track.len().max(2),
        ..*params
    };
    moving_targets(track, ego, &whole)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn track_from_xz(points: &[(f64, f64)], yaw: f64) -> GlobalTrack {
        GlobalTrack::from_samples(
            (0..points.len()).collect(),
            points.iter().map(|(x, z)| Vec3::new(*x, 1.5, *z)).collect(),
            vec![Some(yaw); points.len()],
            10.0,
        )
    }

    #[test]
    fn velocity_profile_cases() {
        let still = track_from_xz(&[(1.0, 2.0); 5], 0.0);
        let p = velocity_profile(&still).unwrap();
        assert!(p.vx.iter().chain(&p.vz).all(|v| *v == 0.0));

        let pts: Vec<(f64, f64)> = (0..6).map(|k| (k as f64, 0.0)).collect();
        let p = velocity_profile(&track_from_xz(&pts, 0.0)).unwrap();
        assert!(p.vx.iter().all(|v| (v - 10.0).abs() < 1e-9));

        let pts: Vec<(f64, f64)> = (0..6).map(|k| (if k % 2 == 0 { 0.1 } else { 0.0 }, 0.0)).collect();
        let p = velocity_profile(&track_from_xz(&pts, 0.0)).unwrap();
        for (k, v) in p.vx.iter().enumerate() {
            let expect = if k % 2 == 0 { -1.0 } else { 1.0 };
            assert!((v - expect).abs() < 1e-9);
        }
        assert_eq!(
            velocity_profile(&track_from_xz(&[(0.0, 0.0)], 0.0)),
            Err(MotionError::TooShort)
        );
    }

    #[test]
    fn classification_cases() {
        let params = MotionParams::default();
        let five = track_from_xz(&[(0.0, 0.0); 5], 0.0);
        assert_eq!(classify_motion(&five, &params), MotionState::Undecided);

        let moving: Vec<(f64, f64)> = (0..10).map(|k| (k as f64, 0.0)).collect();
        assert_eq!(
            classify_motion(&track_from_xz(&moving, 0.0), &params),
            MotionState::Moving
        );

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let jitter: Vec<(f64, f64)> = (0..20)
            .map(|_| (5.0 + noise.sample(&mut rng), 20.0 + noise.sample(&mut rng)))
            .collect();
        assert_eq!(
            classify_motion(&track_from_xz(&jitter, 0.0), &params),
            MotionState::Static
        );
    }

    #[test]
    fn zero_crossings_rescue_outlier_static() {
        // a parked car whose last observation jumps 4 m away
        let mut pts: Vec<(f64, f64)> = (0..12).map(|k| (if k % 2 == 0 { 0.2 } else { -0.2 }, 10.0)).collect();
        pts.push((4.0, 10.0));
        let params = MotionParams::default();
        assert_eq!(classify_motion(&track_from_xz(&pts, 0.0), &params), MotionState::Static);
    }

    #[test]
    fn either_axis_counts_lateral_jitter() {
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|k| (k as f64 * 0.5, if k % 2 == 0 { 0.1 } else { -0.1 }))
            .collect();
        let track = track_from_xz(&pts, 0.0);
        let dominant = MotionParams::default();
        let either = MotionParams {
            crossing_axis: CrossingAxis::EitherAxis,
            ..dominant
        };
        assert_eq!(classify_motion(&track, &dominant), MotionState::Moving);
        assert_eq!(classify_motion(&track, &either), MotionState::Static);
    }

    #[test]
    fn static_target_cases() {
        let ego = EgoTrajectory::stationary(4);
        let track = GlobalTrack::from_samples(
            vec![0, 1, 2],
            vec![
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(2.0, 0.0, 0.0),
                Vec3::new(100.0, 0.0, 0.0),
            ],
            vec![Some(0.1); 3],
            10.0,
        );
        let t = static_targets(&track, &ego, 32).unwrap();
        assert_eq!(t.targets[0].translation, Vec3::new(2.0, 0.0, 0.0));

        let yaws = [0.10, 0.11, 0.12, 3.0];
        let mean = mode_bin_yaw(&yaws, 32).unwrap();
        assert!((mean - 0.11).abs() < 1e-6, "{mean}");

        let same = GlobalTrack::from_samples(vec![0, 1], vec![Vec3::new(3.0, 1.0, 9.0); 2], vec![Some(0.4); 2], 10.0);
        let t = static_targets(&same, &ego, 32).unwrap();
        for target in &t.targets {
            assert!((target.translation - Vec3::new(3.0, 1.0, 9.0)).norm() < 1e-12);
            assert!((target.yaw - 0.4).abs() < 1e-12);
        }
        let blind = GlobalTrack::from_samples(vec![0], vec![Vec3::zeros()], vec![None], 10.0);
        assert_eq!(static_targets(&blind, &ego, 32), Err(MotionError::NoValidYaw));
    }

    #[test]
    fn static_targets_follow_ego_frames() {
        let ego = EgoTrajectory::new(vec![
            RigidTransform::identity(),
            RigidTransform::from_yaw(0.3, Vec3::new(1.0, 0.0, 2.0)),
        ]);
        let local = Vec3::new(2.0, 1.5, 12.0);
        let global = ego.pose(1).unwrap().apply(&local);
        let track = GlobalTrack::from_samples(vec![0, 1], vec![global; 2], vec![Some(0.5); 2], 10.0);
        let t = static_targets(&track, &ego, 32).unwrap();
        assert!((t.targets[1].translation - local).norm() < 1e-12);
        assert!((t.targets[1].yaw - wrap_angle(0.5 - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn ransac_cases() {
        let on_line: Vec<[f64; 2]> = (0..10).map(|k| [k as f64, 2.0 * k as f64]).collect();
        let fit = ransac_line(&on_line, &RansacParams::default()).unwrap();
        let s5 = 5f64.sqrt();
        assert!((fit.direction[0].abs() - 1.0 / s5).abs() < 1e-12);
        assert!((fit.direction[1].abs() - 2.0 / s5).abs() < 1e-12);
        assert!(fit.inliers.iter().all(|b| *b));

        let two = [[0.0, 0.0], [3.0, 4.0]];
        let fit = ransac_line(&two, &RansacParams::default()).unwrap();
        assert!(fit.distance(&[6.0, 8.0]) < 1e-12);

        let clump = [[0.0, 0.0], [0.1, 0.0], [0.0, 0.1]];
        assert_eq!(
            ransac_line(&clump, &RansacParams::default()),
            Err(MotionError::Degenerate)
        );
    }

    /// Best line over every point pair, scored by inlier count.
    fn exhaustive_best_inliers(points: &[[f64; 2]], th: f64) -> usize {
        let mut best = 0;
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let (a, b) = (points[i], points[j]);
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
                best = best.max(points.iter().filter(|p| line_distance(&a, &dir, p) <= th).count());
            }
        }
        best
    }

    #[test]
    fn ransac_rejects_outlier_like_exhaustive_search() {
        let sigma = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut pts: Vec<[f64; 2]> = (0..9)
            .map(|k| [k as f64, 0.5 * k as f64 + noise.sample(&mut rng)])
            .collect();
        pts.insert(4, [4.5, 2.25 + 5.0 * sigma * 5f64.sqrt() / 2.0 * 2.0]);
        let params = RansacParams {
            inlier_threshold: 2.0 * sigma * 1.5,
            iterations: 100,
            seed: 1,
        };
        let fit = ransac_line(&pts, &params).unwrap();
        let count = fit.inliers.iter().filter(|b| **b).count();
        assert_eq!(count, exhaustive_best_inliers(&pts, params.inlier_threshold));
        assert_eq!(count, 9);
        assert!(!fit.inliers[4]);

        // sampled path (too many pairs to enumerate) still finds the consensus
        let many: Vec<[f64; 2]> = (0..40).map(|k| [k as f64 * 0.3, 1.0]).chain([[5.0, 6.0]]).collect();
        let fit = ransac_line(&many, &RansacParams::default()).unwrap();
        assert_eq!(fit.inliers.iter().filter(|b| **b).count(), 40);
    }

    #[test]
    fn segments_merge_short_tail() {
        assert_eq!(segment_ranges(25, 10), vec![0..10, 10..20, 20..25]);
        assert_eq!(segment_ranges(23, 10), vec![0..10, 10..23]);
        assert_eq!(segment_ranges(21, 10), vec![0..10, 10..21]);
        assert_eq!(segment_ranges(3, 10), vec![0..3]);
    }

    #[test]
    fn moving_target_cases() {
        let ego = EgoTrajectory::stationary(30);
        let params = MovingParams::default();
        let straight: Vec<(f64, f64)> = (0..20).map(|k| (k as f64 * 0.8, 5.0)).collect();
        let t = moving_targets(&track_from_xz(&straight, 0.0), &ego, &params).unwrap();
        for (target, (x, z)) in t.targets.iter().zip(&straight) {
            assert!((target.translation - Vec3::new(*x, 1.5, *z)).norm() < 1e-9);
            assert!(target.yaw.abs() < 1e-9);
        }
        let global = global_linear_targets(&track_from_xz(&straight, 0.0), &ego, &params).unwrap();
        for (a, b) in global.targets.iter().zip(&t.targets) {
            assert!((a.translation - b.translation).norm() < 1e-9);
        }

        // collinear track with one 5 m lateral outlier
        let mut bent = straight[..10].to_vec();
        bent[6].1 += 5.0;
        let t = moving_targets(&track_from_xz(&bent, 0.0), &ego, &params).unwrap();
        assert!((t.targets[6].translation - Vec3::new(bent[6].0, 1.5, 5.0)).norm() < 1e-9);

        let two = track_from_xz(&[(0.0, 0.0), (1.0, 1.0)], 0.0);
        let t = global_linear_targets(&two, &ego, &params).unwrap();
        assert!((t.targets[1].translation - Vec3::new(1.0, 1.5, 1.0)).norm() < 1e-12);
        assert!((t.targets[0].yaw - wrap_angle(-PI / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_segment_falls_back_to_median() {
        let ego = EgoTrajectory::stationary(30);
        let mut pts: Vec<(f64, f64)> = (0..10).map(|k| (k as f64, 0.0)).collect();
        pts.extend((0..10).map(|k| (10.0 + 0.01 * k as f64, 0.0)));
        let t = moving_targets(&track_from_xz(&pts, 0.3), &ego, &MovingParams::default()).unwrap();
        let tail = &t.targets[10..];
        assert!(tail
            .iter()
            .all(|x| (x.translation - tail[0].translation).norm() < 1e-12));
        assert!((tail[0].yaw - 0.3).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn classification_invariances(
            seed in 0u64..300,
            yaw in -3.0f64..3.0,
            shift in -100.0f64..100.0,
            speed in 0.0f64..12.0,
            len in 6usize..40,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.2).unwrap();
            let pts: Vec<(f64, f64)> = (0..len)
                .map(|k| (speed * k as f64 / 10.0 + noise.sample(&mut rng), noise.sample(&mut rng)))
                .collect();
            let track = track_from_xz(&pts, 0.0);
            let params = MotionParams::default();
            let state = classify_motion(&track, &params);
            let g = RigidTransform::from_yaw(yaw, Vec3::new(shift, 0.0, -shift));
            prop_assert_eq!(classify_motion(&track.moved_by(&g), &params), state);

            let mut reversed = track.clone();
            reversed.positions.reverse();
            let reversed_state = classify_motion(&reversed, &params);
            prop_assert_eq!(reversed_state == MotionState::Static, state == MotionState::Static);
        }

        #[test]
        fn noiseless_extremes(len in 6usize..60, speed_margin in 1.01f64..5.0) {
            let params = MotionParams::default();
            let duration = (len - 1) as f64 / 10.0;
            let speed = speed_margin * params.distance_threshold / duration;
            let pts: Vec<(f64, f64)> = (0..len).map(|k| (speed * k as f64 / 10.0, 0.0)).collect();
            prop_assert_eq!(classify_motion(&track_from_xz(&pts, 0.0), &params), MotionState::Moving);
            let fixed = vec![(4.0, 7.0); len];
            prop_assert_eq!(classify_motion(&track_from_xz(&fixed, 0.0), &params), MotionState::Static);
        }

        #[test]
        fn median_outlier_robustness(values in prop::collection::vec(-50.0f64..50.0, 5..30), outlier in 100.0f64..1e6) {
            let positions: Vec<Vec3> = values.iter().map(|v| Vec3::new(*v, 0.0, 0.0)).collect();
            let before = median_position(&positions).x;
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let mut with = positions.clone();
            with.push(Vec3::new(outlier, 0.0, 0.0));
            let after = median_position(&with).x;
            let spread = sorted.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
            prop_assert!((after - before).abs() <= spread + 1e-12);
        }

        #[test]
        fn smoothed_points_lie_on_segment_lines(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.15).unwrap();
            let pts: Vec<(f64, f64)> = (0..27)
                .map(|k| (k as f64 * 0.7 + noise.sample(&mut rng), 0.2 * k as f64 + noise.sample(&mut rng)))
                .collect();
            let track = track_from_xz(&pts, 0.0);
            let ego = EgoTrajectory::stationary(30);
            let params = MovingParams::default();
            let t = moving_targets(&track, &ego, &params).unwrap();
            for range in segment_ranges(27, 10) {
                let plane: Vec<[f64; 2]> = pts[range.clone()].iter().map(|(x, z)| [*x, *z]).collect();
                let line = ransac_line(&plane, &RansacParams { seed: params.ransac.seed + (range.start / 10) as u64, ..params.ransac }).unwrap();
                for i in range {
                    let g = t.targets[i].global_translation;
                    prop_assert!(line.distance(&[g.x, g.z]) < 1e-9);
                }
            }
        }
    }
}
