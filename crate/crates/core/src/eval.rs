//! Rotated-box overlap and KITTI-style average precision.

use std::fmt::Write as _;
use std::io;

use thiserror::Error;

use crate::geometry::{Pose4DoF, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no ground-truth boxes")]
    NoGroundTruth,
    #[error("{detections} detection frames but {ground_truth} ground-truth frames")]
    FrameMismatch { detections: usize, ground_truth: usize },
}

/// A 3D box in camera coordinates. `center` is the middle of the bottom
/// face (the KITTI location), so the box spans `[y − h, y]` vertically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vec3,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
    pub score: f64,
}

impl Box3D {
    pub fn new(center: Vec3, length: f64, width: f64, height: f64, yaw: f64, score: f64) -> Self {
        assert!(
            length > 0.0 && width > 0.0 && height > 0.0,
            "box dimensions must be positive"
        );
        Self {
            center,
            length,
            width,
            height,
            yaw,
            score,
        }
    }

    /// Footprint corners in the (x, z) plane, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let along = [c * self.length / 2.0, -s * self.length / 2.0];
        let across = [s * self.width / 2.0, c * self.width / 2.0];
        let (x, z) = (self.center.x, self.center.z);
        let mut corners = [
            [x + along[0] + across[0], z + along[1] + across[1]],
            [x - along[0] + across[0], z - along[1] + across[1]],
            [x - along[0] - across[0], z - along[1] - across[1]],
            [x + along[0] - across[0], z + along[1] - across[1]],
        ];
        if signed_area(&corners) < 0.0 {
            corners.reverse();
        }
        corners
    }

    /// Whether an (x, z) point lies inside the footprint.
    pub fn bev_contains(&self, x: f64, z: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dz) = (x - self.center.x, z - self.center.z);
        let along = dx * c - dz * s;
        let across = dx * s + dz * c;
        along.abs() <= self.length / 2.0 && across.abs() <= self.width / 2.0
    }

    pub fn bev_area(&self) -> f64 {
        self.length * self.width
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    /// The eight corners in camera coordinates.
    pub fn corners(&self) -> [Vec3; 8] {
        let bev = self.bev_corners();
        let mut out = [Vec3::zeros(); 8];
        for (i, [x, z]) in bev.iter().enumerate() {
            out[i] = Vec3::new(*x, self.center.y, *z);
            out[i + 4] = Vec3::new(*x, self.center.y - self.height, *z);
        }
        out
    }
}

/// Box extents of an object-frame shape. The box spans the shape's
/// axis-aligned bounds, extended down by `clearance` to the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxGeometry {
    /// Object-frame position of the bottom-face center.
    pub bottom: Vec3,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl BoxGeometry {
    pub fn of_shape(points: &[Vec3], clearance: f64) -> Self {
        let (center, size) = crate::shapespace::bounding_box(points);
        Self {
            bottom: center + Vec3::new(0.0, size.y / 2.0 + clearance, 0.0),
            length: size.x,
            width: size.z,
            height: size.y + clearance,
        }
    }

    pub fn to_box(&self, pose: &Pose4DoF, score: f64) -> Box3D {
        Box3D::new(
            pose.transform().apply(&self.bottom),
            self.length,
            self.width,
            self.height,
            pose.yaw(),
            score,
        )
    }

    /// Pose whose box has the given bottom center and yaw.
    pub fn pose_of(&self, b: &Box3D) -> Pose4DoF {
        let r = crate::geometry::yaw_rotation(b.yaw);
        Pose4DoF::new(b.center - r * self.bottom, b.yaw)
    }
}

fn signed_area(polygon: &[[f64; 2]]) -> f64 {
    let n = polygon.len();
    (0..n)
        .map(|i| {
            let [x0, y0] = polygon[i];
            let [x1, y1] = polygon[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f64>()
        / 2.0
}

/// Clips a polygon against a convex counter-clockwise polygon.
fn clip(subject: &[[f64; 2]], clipper: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let n = clipper.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clipper[i];
        let b = clipper[(i + 1) % n];
        let side = |p: &[f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(&cur), side(&prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip(&a.bev_corners(), &b.bev_corners());
    if poly.len() < 3 {
        0.0
    } else {
        signed_area(&poly).abs()
    }
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let top = (a.center.y - a.height).max(b.center.y - b.height);
    let bottom = a.center.y.min(b.center.y);
    let overlap = (bottom - top).max(0.0);
    let inter = bev_intersection(a, b) * overlap;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IouMode {
    Bev,
    ThreeD,
}

impl IouMode {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            Self::Bev => bev_iou(a, b),
            Self::ThreeD => iou_3d(a, b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bev => "bev",
            Self::ThreeD => "3d",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Interpolation {
    R11,
    R40,
}

impl Interpolation {
    /// Recall levels at which precision is sampled.
    pub fn recall_points(self) -> Vec<f64> {
        match self {
            Self::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
            Self::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::R11 => "R11",
            Self::R40 => "R40",
        }
    }
}

/// Precision/recall after each detection, in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Matches detections to ground truth frame by frame, highest score
/// first; a detection takes the unmatched ground-truth box of highest IoU
/// at or above the threshold.
pub fn pr_curve(
    detections: &[Vec<Box3D>],
    ground_truth: &[Vec<Box3D>],
    iou_threshold: f64,
    mode: IouMode,
) -> Result<PrCurve, EvalError> {
    if detections.len() != ground_truth.len() {
        return Err(EvalError::FrameMismatch {
            detections: detections.len(),
            ground_truth: ground_truth.len(),
        });
    }
    let total_gt: usize = ground_truth.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut order: Vec<(usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(f, dets)| (0..dets.len()).map(move |i| (f, i)))
        .collect();
    order.sort_by(|a, b| detections[b.0][b.1].score.total_cmp(&detections[a.0][a.1].score));

    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = PrCurve {
        precision: Vec::with_capacity(order.len()),
        recall: Vec::with_capacity(order.len()),
    };
    for (k, (f, i)) in order.iter().enumerate() {
        let det = &detections[*f][*i];
        let best = ground_truth[*f]
            .iter()
            .enumerate()
            .filter(|(g, _)| !matched[*f][*g])
            .map(|(g, gt)| (g, mode.iou(det, gt)))
            .filter(|(_, iou)| *iou >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            matched[*f][g] = true;
            tp += 1;
        }
        curve.precision.push(tp as f64 / (k + 1) as f64);
        curve.recall.push(tp as f64 / total_gt as f64);
    }
    Ok(curve)
}

/// Interpolated average precision in percent.
pub fn average_precision(
    detections: &[Vec<Box3D>],
    ground_truth: &[Vec<Box3D>],
    iou_threshold: f64,
    mode: IouMode,
    interpolation: Interpolation,
) -> Result<f64, EvalError> {
    let curve = pr_curve(detections, ground_truth, iou_threshold, mode)?;
    Ok(interpolated_ap(&curve, interpolation))
}

pub fn interpolated_ap(curve: &PrCurve, interpolation: Interpolation) -> f64 {
    let mut envelope = curve.precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let points = interpolation.recall_points();
    let sum: f64 = points
        .iter()
        .map(|r| {
            curve
                .recall
                .iter()
                .position(|rec| *rec >= *r - 1e-12)
                .map_or(0.0, |i| envelope[i])
        })
        .sum();
    100.0 * sum / points.len() as f64
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub label: String,
    pub mode: IouMode,
    pub interpolation: Interpolation,
    pub threshold: f64,
    pub value: f64,
}

/// AP in both modes and both interpolations at one threshold.
pub fn evaluate(
    label: &str,
    detections: &[Vec<Box3D>],
    ground_truth: &[Vec<Box3D>],
    iou_threshold: f64,
) -> Result<Vec<Metric>, EvalError> {
    let mut out = Vec::new();
    for mode in [IouMode::Bev, IouMode::ThreeD] {
        let curve = pr_curve(detections, ground_truth, iou_threshold, mode)?;
        for interpolation in [Interpolation::R11, Interpolation::R40] {
            out.push(Metric {
                label: label.to_string(),
                mode,
                interpolation,
                threshold: iou_threshold,
                value: interpolated_ap(&curve, interpolation),
            });
        }
    }
    Ok(out)
}

pub fn report_text(metrics: &[Metric]) -> String {
    let mut s = String::new();
    for m in metrics {
        let _ = writeln!(
            s,
            "{:<12} AP_{}_{} @{:.2} {:>8.4}",
            m.label,
            m.mode.as_str(),
            m.interpolation.as_str(),
            m.threshold,
            m.value
        );
    }
    s
}

pub fn write_report_csv<W: io::Write>(metrics: &[Metric], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["label", "mode", "interpolation", "threshold", "ap"])?;
    for m in metrics {
        out.write_record([
            m.label.clone(),
            m.mode.as_str().to_string(),
            m.interpolation.as_str().to_string(),
            m.threshold.to_string(),
            m.value.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(x: f64, yaw: f64) -> Box3D {
        Box3D::new(Vec3::new(x, 0.0, 0.0), 1.0, 1.0, 1.0, yaw, 1.0)
    }

    /// Footprint IoU from a jittered grid over the joint bounding rectangle.
    fn grid_iou(a: &Box3D, b: &Box3D, side: usize, rng: &mut ChaCha8Rng) -> f64 {
        let pts: Vec<[f64; 2]> = a.bev_corners().into_iter().chain(b.bev_corners()).collect();
        let (x0, x1) = pts
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p[0]), h.max(p[0])));
        let (z0, z1) = pts
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p[1]), h.max(p[1])));
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..side {
            for j in 0..side {
                let x = x0 + (x1 - x0) * (i as f64 + rng.random::<f64>()) / side as f64;
                let z = z0 + (z1 - z0) * (j as f64 + rng.random::<f64>()) / side as f64;
                let (ia, ib) = (a.bev_contains(x, z), b.bev_contains(x, z));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_cases() {
        let a = unit(0.0, 0.3);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        assert!((bev_iou(&unit(0.0, 0.0), &unit(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert!((iou_3d(&unit(0.0, 0.0), &unit(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-15);
        let mut high = unit(0.0, 0.0);
        high.center.y = -5.0;
        assert_eq!(iou_3d(&unit(0.0, 0.0), &high), 0.0);
        assert_eq!(bev_iou(&unit(0.0, 0.0), &unit(3.0, 0.0)), 0.0);
        // a square rotated 45° inside its own circumscribed square
        let rotated = Box3D::new(Vec3::zeros(), 1.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4, 1.0);
        let big = Box3D::new(Vec3::zeros(), 2f64.sqrt(), 2f64.sqrt(), 1.0, 0.0, 1.0);
        assert!((bev_iou(&rotated, &big) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bev_iou_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let mk = |rng: &mut ChaCha8Rng| {
                Box3D::new(
                    Vec3::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0)),
                    rng.random_range(1.0..4.5),
                    rng.random_range(0.8..2.0),
                    1.5,
                    rng.random_range(-3.2..3.2),
                    1.0,
                )
            };
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let oracle = grid_iou(&a, &b, 300, &mut rng);
            assert!((bev_iou(&a, &b) - oracle).abs() < 5e-3);
        }
    }

    fn at(x: f64, score: f64) -> Box3D {
        Box3D::new(Vec3::new(x, 1.0, 10.0), 4.0, 1.8, 1.5, 0.0, score)
    }

    #[test]
    fn ap_cases() {
        let gt = vec![vec![at(0.0, 1.0)], vec![at(5.0, 1.0), at(-5.0, 1.0)]];
        for interp in [Interpolation::R11, Interpolation::R40] {
            let ap = average_precision(&gt, &gt, 0.5, IouMode::ThreeD, interp).unwrap();
            assert!((ap - 100.0).abs() < 1e-12);
            let none = vec![vec![], vec![]];
            assert_eq!(average_precision(&none, &gt, 0.5, IouMode::Bev, interp).unwrap(), 0.0);
        }
        assert_eq!(
            average_precision(&[vec![]], &[vec![]], 0.5, IouMode::Bev, Interpolation::R11),
            Err(EvalError::NoGroundTruth)
        );
    }

    #[test]
    fn hand_built_pr_curve() {
        // frame 0: one hit (0.9); frame 1: a false positive (0.8) and a hit
        // (0.6); frame 2: its only object is missed, plus a hit (0.7)
        let gt = vec![
            vec![at(0.0, 1.0)],
            vec![at(0.0, 1.0)],
            vec![at(0.0, 1.0), at(20.0, 1.0)],
        ];
        let dets = vec![
            vec![at(0.1, 0.9)],
            vec![at(10.0, 0.8), at(0.0, 0.6)],
            vec![at(0.0, 0.7)],
        ];
        // order: TP(0.9) FP(0.8) TP(0.7) TP(0.6); 4 ground-truth boxes
        // precision 1, 1/2, 2/3, 3/4; recall 1/4, 1/4, 2/4, 3/4
        let curve = pr_curve(&dets, &gt, 0.5, IouMode::Bev).unwrap();
        assert_eq!(curve.precision, vec![1.0, 0.5, 2.0 / 3.0, 0.75]);
        assert_eq!(curve.recall, vec![0.25, 0.25, 0.5, 0.75]);
        // envelope 1, .75, .75, .75; R11: r=0..0.2 → 1, 0.3..0.7 → 0.75, 0.8.. → 0
        let r11 = (3.0 * 1.0 + 5.0 * 0.75) / 11.0 * 100.0;
        let ap = average_precision(&dets, &gt, 0.5, IouMode::Bev, Interpolation::R11).unwrap();
        assert!((ap - r11).abs() < 1e-12);
        // R40: r=1/40..10/40 → 1, 11/40..30/40 → 0.75
        let r40 = (10.0 * 1.0 + 20.0 * 0.75) / 40.0 * 100.0;
        let ap = average_precision(&dets, &gt, 0.5, IouMode::Bev, Interpolation::R40).unwrap();
        assert!((ap - r40).abs() < 1e-12);
    }

    #[test]
    fn box_geometry_round_trip() {
        let shape = vec![Vec3::new(-2.0, -0.7, -0.9), Vec3::new(2.2, 0.6, 0.9)];
        let g = BoxGeometry::of_shape(&shape, 0.15);
        assert!((g.height - 1.45).abs() < 1e-12);
        assert!((g.bottom - Vec3::new(0.1, 0.75, 0.0)).norm() < 1e-12);
        let pose = Pose4DoF::new(Vec3::new(3.0, 1.0, 20.0), 0.7);
        let b = g.to_box(&pose, 0.9);
        let back = g.pose_of(&b);
        assert!((back.translation - pose.translation).norm() < 1e-12);
        assert!((back.yaw() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn report_formats() {
        let gt = vec![vec![at(0.0, 1.0)]];
        let metrics = evaluate("iter_1", &gt, &gt, 0.5).unwrap();
        assert_eq!(metrics.len(), 4);
        assert_eq!(report_text(&metrics).lines().count(), 4);
        let mut buf = Vec::new();
        write_report_csv(&metrics, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("label,mode,interpolation,threshold,ap"));
        assert!(text.contains("iter_1,bev,R11,0.5,100"));
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-3.0f64..3.0, -3.0f64..3.0, 0.5f64..5.0, 0.5f64..3.0, -4.0f64..4.0)
            .prop_map(|(x, z, l, w, yaw)| Box3D::new(Vec3::new(x, 1.0, z), l, w, 1.5, yaw, 1.0))
    }

    proptest! {
        #[test]
        fn bev_iou_invariants(a in arb_box(), b in arb_box(), yaw in -3.0f64..3.0, tx in -9.0f64..9.0) {
            let ab = bev_iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - bev_iou(&b, &a)).abs() < 1e-9);
            let (s, c) = yaw.sin_cos();
            let moved = |bx: &Box3D| {
                let p = bx.center;
                Box3D { center: Vec3::new(c * p.x + s * p.z + tx, p.y, -s * p.x + c * p.z), yaw: bx.yaw + yaw, ..*bx }
            };
            prop_assert!((bev_iou(&moved(&a), &moved(&b)) - ab).abs() < 1e-9);
        }

        #[test]
        fn removing_a_false_positive_never_hurts(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt: Vec<Vec<Box3D>> = (0..3).map(|_| (0..2).map(|k| at(10.0 * k as f64, 1.0)).collect()).collect();
            let mut dets: Vec<Vec<Box3D>> = gt
                .iter()
                .map(|g| g.iter().map(|b| at(b.center.x + rng.random_range(-1.0..1.0), rng.random::<f64>())).collect())
                .collect();
            dets[1].push(at(50.0, rng.random::<f64>()));
            let with = average_precision(&dets, &gt, 0.5, IouMode::Bev, Interpolation::R40).unwrap();
            dets[1].pop();
            let without = average_precision(&dets, &gt, 0.5, IouMode::Bev, Interpolation::R40).unwrap();
            prop_assert!(without >= with - 1e-9);
        }
    }
}
