//! Rigid frames, yaw handling and pinhole projection.
//!
//! Conventions follow the KITTI camera frame: x points right, y points down,
//! z points forward. The vertical axis is −y, so a yaw rotation is a rotation
//! about the camera y axis and a heading of `yaw` points along
//! `(cos yaw, 0, −sin yaw)`. The global frame of a sequence is the camera
//! frame of its first frame.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Horizontal norms below this are treated as a vertical (undefined) heading.
pub const HEADING_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("heading is near-vertical (horizontal norm {0:.3e})")]
    DegenerateHeading(f64),
    #[error("rotation is not orthonormal with det +1 (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = (angle + PI).rem_euclid(two_pi) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if a >= PI {
        a -= two_pi;
    }
    a
}

/// Rotation about the vertical axis by `yaw` (KITTI `rotation_y`).
pub fn yaw_rotation(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Derivative of [`yaw_rotation`] with respect to the angle.
pub fn yaw_rotation_derivative(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    Mat3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

/// Unit heading vector of a yaw angle.
pub fn heading_vector(yaw: f64) -> Vec3 {
    Vec3::new(yaw.cos(), 0.0, -yaw.sin())
}

/// Yaw of a direction from its horizontal components; `None` when the
/// direction is (near) vertical.
pub fn yaw_of_direction(dir: &Vec3) -> Option<f64> {
    let horizontal = dir.x.hypot(dir.z);
    if horizontal < HEADING_EPS {
        None
    } else {
        Some(wrap_angle((-dir.z).atan2(dir.x)))
    }
}

/// A rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl fmt::Debug for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.rotation;
        let t = &self.translation;
        write!(
            f,
            "RigidTransform[[{:.6}, {:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}, {:.6}]]",
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z
        )
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let deviation = rotation_deviation(&rotation);
        if deviation > 1e-6 || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotOrthonormal(deviation));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Rotation about the vertical axis followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self {
            rotation: yaw_rotation(yaw),
            translation,
        }
    }

    /// Builds from 12 row-major values of a 3×4 matrix `[R | t]`.
    pub fn from_row_major(values: &[f64; 12]) -> Self {
        let rotation = Mat3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9], values[10],
        );
        let translation = Vec3::new(values[3], values[7], values[11]);
        Self { rotation, translation }
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    /// Distance of the rotation block from a proper rotation.
    pub fn orthonormality_error(&self) -> f64 {
        rotation_deviation(&self.rotation)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

fn rotation_deviation(r: &Mat3) -> f64 {
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    if ortho.is_nan() || det.is_nan() {
        f64::INFINITY
    } else {
        ortho.max(det)
    }
}

/// A 4-DoF object pose: translation in the local camera frame plus yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose4DoF {
    pub translation: Vec3,
    yaw: f64,
}

impl Pose4DoF {
    pub fn new(translation: Vec3, yaw: f64) -> Self {
        Self {
            translation,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn set_yaw(&mut self, yaw: f64) {
        self.yaw = wrap_angle(yaw);
    }

    /// The object-to-camera transform of this pose.
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_yaw(self.yaw, self.translation)
    }
}

/// `T·t`: a local translation expressed in the global frame.
pub fn to_global_translation(t: &Vec3, ego: &RigidTransform) -> Vec3 {
    ego.apply(t)
}

/// Inverse of [`to_global_translation`].
pub fn to_local_translation(t_global: &Vec3, ego: &RigidTransform) -> Vec3 {
    ego.rotation.transpose() * (t_global - ego.translation)
}

/// Heading angle of a local yaw after rotating it into the global frame and
/// projecting it onto the global horizontal plane.
pub fn to_global_yaw(yaw: f64, ego: &RigidTransform) -> Result<f64, GeometryError> {
    let heading = ego.rotation * heading_vector(yaw);
    let horizontal = heading.x.hypot(heading.z);
    yaw_of_direction(&heading).ok_or(GeometryError::DegenerateHeading(horizontal))
}

/// Inverse of [`to_global_yaw`]: a global heading expressed in a local frame.
pub fn to_local_yaw(global_yaw: f64, ego: &RigidTransform) -> Result<f64, GeometryError> {
    to_global_yaw(global_yaw, &ego.inverse())
}

/// Per-frame transforms from each frame's camera frame to the frame-0
/// camera frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EgoTrajectory {
    poses: Vec<RigidTransform>,
}

impl EgoTrajectory {
    pub fn new(poses: Vec<RigidTransform>) -> Self {
        Self { poses }
    }

    /// A trajectory with every frame at the origin.
    pub fn stationary(frames: usize) -> Self {
        Self::new(vec![RigidTransform::identity(); frames])
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn pose(&self, frame: usize) -> Option<&RigidTransform> {
        self.poses.get(frame)
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }

    /// The same trajectory seen from a moved world frame: `G ∘ T_i`.
    pub fn moved_by(&self, g: &RigidTransform) -> Self {
        Self::new(self.poses.iter().map(|t| g.compose(t)).collect())
    }

    /// Re-expresses poses given for another sensor in the camera frame, using
    /// the sensor-to-camera extrinsic `c`: `C ∘ T_i ∘ C⁻¹`.
    pub fn conjugated(&self, c: &RigidTransform) -> Self {
        let inv = c.inverse();
        Self::new(self.poses.iter().map(|t| c.compose(t).compose(&inv)).collect())
    }

    /// Parses odometry-style text: 12 row-major floats per line.
    pub fn parse(text: &str) -> Result<Self, PoseFileError> {
        let mut poses = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| PoseFileError {
                    line: i + 1,
                    message: format!("{e}"),
                })?;
            let vals: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| PoseFileError {
                line: i + 1,
                message: format!("expected 12 values, found {}", v.len()),
            })?;
            let t = RigidTransform::from_row_major(&vals);
            if t.orthonormality_error() > 1e-4 {
                return Err(PoseFileError {
                    line: i + 1,
                    message: "rotation block is not orthonormal".into(),
                });
            }
            poses.push(t);
        }
        Ok(Self::new(poses))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.poses {
            let vals: Vec<String> = t.to_row_major().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("pose file line {line}: {message}")]
pub struct PoseFileError {
    pub line: usize,
    pub message: String,
}

/// Pinhole intrinsics with the image extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_width: u32,
    pub image_height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, image_width: u32, image_height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            image_width,
            image_height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        if !(self.cx >= 0.0 && self.cx < w && self.cy >= 0.0 && self.cy < h) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.image_width, self.image_height
            )));
        }
        Ok(())
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.image_width as f64 && v < self.image_height as f64
    }

    /// Projects a single camera-frame point.
    pub fn project(&self, p: &Vec3) -> Projection {
        if p.z <= 1e-6 {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                valid: false,
            };
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        Projection {
            u,
            v,
            valid: self.contains_pixel(u, v),
        }
    }
}

/// Pixel coordinates of a projected point; `valid` is false behind the
/// camera or outside the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

pub fn project_points(points: &[Vec3], intrinsics: &CameraIntrinsics) -> Vec<Projection> {
    points.iter().map(|p| intrinsics.project(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_transform(yaw: f64, ax: f64, ay: f64, t: [f64; 3]) -> RigidTransform {
        let r = nalgebra::Rotation3::from_euler_angles(ax, yaw, ay);
        RigidTransform::new(*r.matrix(), Vec3::new(t[0], t[1], t[2])).unwrap()
    }

    #[test]
    fn yaw_rotation_cases() {
        assert_abs_diff_eq!(yaw_rotation(0.0), Mat3::identity(), epsilon = 1e-15);
        let flipped = yaw_rotation(PI) * Vec3::x();
        assert_abs_diff_eq!(flipped, -Vec3::x(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            yaw_rotation(0.3) * yaw_rotation(-0.3),
            Mat3::identity(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(yaw_rotation(0.7).determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn yaw_derivative_matches_finite_difference() {
        let h = 1e-6;
        let fd = (yaw_rotation(0.4 + h) - yaw_rotation(0.4 - h)) / (2.0 * h);
        assert_abs_diff_eq!(fd, yaw_rotation_derivative(0.4), epsilon = 1e-8);
    }

    #[test]
    fn global_translation_cases() {
        let t = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(to_global_translation(&t, &RigidTransform::identity()), t);
        let shift = RigidTransform::from_translation(Vec3::new(5.0, 0.0, 0.0));
        assert_eq!(to_global_translation(&t, &shift), Vec3::new(6.0, 2.0, 3.0));
        let ego = random_transform(0.4, 0.1, -0.05, [3.0, -1.0, 7.0]);
        let back = to_local_translation(&to_global_translation(&t, &ego), &ego);
        assert_abs_diff_eq!(back, t, epsilon = 1e-9);
    }

    #[test]
    fn global_yaw_cases() {
        let id = RigidTransform::identity();
        assert_abs_diff_eq!(to_global_yaw(0.5, &id).unwrap(), 0.5, epsilon = 1e-12);
        let rot = RigidTransform::from_yaw(0.2, Vec3::zeros());
        assert_abs_diff_eq!(to_global_yaw(0.5, &rot).unwrap(), 0.7, epsilon = 1e-12);
        let rot = RigidTransform::from_yaw(1.0, Vec3::zeros());
        assert_abs_diff_eq!(to_global_yaw(3.0, &rot).unwrap(), 4.0 - 2.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn vertical_heading_is_degenerate() {
        // tilt the frame so the heading (+x) points straight down (+y)
        let r = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), PI / 2.0);
        let ego = RigidTransform::new(*r.matrix(), Vec3::zeros()).unwrap();
        assert!(matches!(
            to_global_yaw(0.0, &ego),
            Err(GeometryError::DegenerateHeading(_))
        ));
    }

    #[test]
    fn projection_cases() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 100).unwrap();
        let p = k.project(&Vec3::new(0.0, 0.0, 1.0));
        assert_eq!((p.u, p.v, p.valid), (50.0, 50.0, true));
        assert!(!k.project(&Vec3::new(0.0, 0.0, -1.0)).valid);
        let p = k.project(&Vec3::new(1.0, 0.0, 2.0));
        assert_eq!((p.u, p.v, p.valid), (100.0, 50.0, true));
        // outside the image is flagged but still reported
        let p = k.project(&Vec3::new(10.0, 0.0, 1.0));
        assert!(!p.valid);
        assert_eq!(p.u, 1050.0);
        assert_eq!(project_points(&[Vec3::z(), -Vec3::z()], &k).len(), 2);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 11.0, 1.0, 10, 10).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let t = random_transform(0.3, 0.2, 0.1, [1.0, 2.0, 3.0]);
        let back = RigidTransform::from_row_major(&t.to_row_major());
        assert_eq!(t, back);
        assert!(RigidTransform::new(Mat3::identity() * 2.0, Vec3::zeros()).is_err());
    }

    #[test]
    fn pose_file_round_trip() {
        let ego = EgoTrajectory::new(vec![
            RigidTransform::identity(),
            random_transform(0.3, 0.01, 0.02, [0.5, 0.0, 1.5]),
        ]);
        assert_eq!(EgoTrajectory::parse(&ego.to_text()).unwrap(), ego);
        let err = EgoTrajectory::parse("1 0 0 0 0 1 0 0 0 0 1\n").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(EgoTrajectory::parse("1 0 0 0 0 1 0 0 0 0 x 0").is_err());
    }

    #[test]
    fn wrap_edges() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI + 0.1), -PI + 0.1, epsilon = 1e-12);
        assert!(wrap_angle(-1e-18) < PI);
    }

    proptest! {
        #[test]
        fn compose_associative_and_invertible(
            a in prop::array::uniform4(-3.0f64..3.0),
            b in prop::array::uniform4(-3.0f64..3.0),
            c in prop::array::uniform4(-3.0f64..3.0),
        ) {
            let ta = random_transform(a[0], a[1], a[2], [a[3], a[0], a[1]]);
            let tb = random_transform(b[0], b[1], b[2], [b[3], b[2], b[0]]);
            let tc = random_transform(c[0], c[1], c[2], [c[3], c[1], c[2]]);
            let left = ta.compose(&tb).compose(&tc);
            let right = ta.compose(&tb.compose(&tc));
            prop_assert!((left.rotation - right.rotation).abs().max() < 1e-9);
            prop_assert!((left.translation - right.translation).abs().max() < 1e-9);
            let id = ta.compose(&ta.inverse());
            prop_assert!((id.rotation - Mat3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation.abs().max() < 1e-9);
        }

        #[test]
        fn global_yaw_under_vertical_rotation(yaw in -10.0f64..10.0, psi in -10.0f64..10.0) {
            let ego = RigidTransform::from_yaw(psi, Vec3::new(1.0, 0.0, -2.0));
            let got = to_global_yaw(yaw, &ego).unwrap();
            let diff = wrap_angle(got - wrap_angle(yaw + psi)).abs();
            prop_assert!(diff < 1e-9);
            prop_assert!((-PI..PI).contains(&got));
        }

        #[test]
        fn yaw_rotation_is_isometry(yaw in -10.0f64..10.0, v in prop::array::uniform3(-100.0f64..100.0)) {
            let v = Vec3::new(v[0], v[1], v[2]);
            prop_assert!(((yaw_rotation(yaw) * v).norm() - v.norm()).abs() < 1e-9);
        }
    }
}
