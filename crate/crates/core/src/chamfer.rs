//! Chamfer alignment between a posed shape and an observed scan.
//!
//! The distance is the unnormalized two-sided sum of squared
//! nearest-neighbour distances. [`ChamferMode::Mean`] divides each side by
//! its point count instead.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{yaw_rotation, yaw_rotation_derivative, CameraIntrinsics, Pose4DoF, Vec3};
use crate::kdtree::KdTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChamferError {
    #[error("no points survive the instance mask")]
    EmptyResult,
    #[error("nearest-neighbour target is empty")]
    EmptyTarget,
    #[error("chamfer distance needs two nonempty clouds")]
    EmptyCloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Camera,
    Lidar,
    Global,
    Object,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// An instance mask, as a dense bitmap or as a polygon in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum InstanceMask {
    Bitmap {
        width: u32,
        height: u32,
        bits: Vec<bool>,
    },
    Polygon(Vec<[f64; 2]>),
    /// One instance of a shared label image.
    Instance {
        labels: Arc<LabelImage>,
        id: u8,
    },
}

/// Per-pixel instance ids (0 = background), possibly at a lower resolution
/// than the camera image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    /// Label pixels per camera pixel.
    pub scale: f64,
    pub ids: Vec<u8>,
}

impl LabelImage {
    pub fn new(width: u32, height: u32, scale: f64) -> Self {
        Self {
            width,
            height,
            scale,
            ids: vec![0; (width as usize) * (height as usize)],
        }
    }

    /// Id under camera pixel `(u, v)`; 0 outside the image.
    pub fn at(&self, u: f64, v: f64) -> u8 {
        let (x, y) = (u * self.scale, v * self.scale);
        if !(x >= 0.0 && y >= 0.0) {
            return 0;
        }
        let (col, row) = (x.floor() as usize, y.floor() as usize);
        if col >= self.width as usize || row >= self.height as usize {
            return 0;
        }
        self.ids[row * self.width as usize + col]
    }

    /// Camera-pixel bounding box `[u0, v0, u1, v1]` of every id present.
    pub fn instance_boxes(&self) -> Vec<(u8, [f64; 4])> {
        let mut boxes: Vec<Option<[usize; 4]>> = vec![None; 256];
        let w = self.width as usize;
        for (i, id) in self.ids.iter().enumerate() {
            if *id == 0 {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let b = boxes[*id as usize].get_or_insert([x, y, x, y]);
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
        boxes
            .into_iter()
            .enumerate()
            .filter_map(|(id, b)| {
                b.map(|[x0, y0, x1, y1]| {
                    (
                        id as u8,
                        [
                            x0 as f64 / self.scale,
                            y0 as f64 / self.scale,
                            (x1 + 1) as f64 / self.scale,
                            (y1 + 1) as f64 / self.scale,
                        ],
                    )
                })
            })
            .collect()
    }
}

impl InstanceMask {
    pub fn full(width: u32, height: u32) -> Self {
        Self::Bitmap {
            width,
            height,
            bits: vec![true; (width * height) as usize],
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Self::Bitmap { width, height, bits } => {
                if !(u >= 0.0 && v >= 0.0) {
                    return false;
                }
                let (col, row) = (u.floor() as u64, v.floor() as u64);
                if col >= *width as u64 || row >= *height as u64 {
                    return false;
                }
                bits[(row * *width as u64 + col) as usize]
            }
            Self::Polygon(vertices) => point_in_polygon(vertices, u, v),
            Self::Instance { labels, id } => *id != 0 && labels.at(u, v) == *id,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Self::Bitmap { bits, .. } => !bits.iter().any(|b| *b),
            Self::Polygon(v) => v.len() < 3,
            Self::Instance { labels, id } => *id == 0 || !labels.ids.contains(id),
        }
    }
}

/// Even-odd rule.
fn point_in_polygon(vertices: &[[f64; 2]], x: f64, y: f64) -> bool {
    let n = vertices.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let [xi, yi] = vertices[i];
        let [xj, yj] = vertices[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Places object-frame points into the scene: `p ↦ R(yaw)·p + t`.
pub fn transform_to_scene(shape_points: &[Vec3], pose: &Pose4DoF) -> PointCloud {
    let r = yaw_rotation(pose.yaw());
    PointCloud::new(
        shape_points.iter().map(|p| r * p + pose.translation).collect(),
        Frame::Camera,
    )
}

/// Keeps the scan points whose projection lands on the mask.
pub fn filter_by_mask(
    scan: &PointCloud,
    mask: &InstanceMask,
    intrinsics: &CameraIntrinsics,
) -> Result<PointCloud, ChamferError> {
    let kept: Vec<Vec3> = scan
        .points
        .iter()
        .filter(|p| {
            let proj = intrinsics.project(p);
            proj.valid && mask.contains(proj.u, proj.v)
        })
        .copied()
        .collect();
    if kept.is_empty() {
        Err(ChamferError::EmptyResult)
    } else {
        Ok(PointCloud::new(kept, scan.frame))
    }
}

pub fn nearest_neighbor_index(query: &Vec3, target: &KdTree) -> Result<(usize, f64), ChamferError> {
    target.nearest(query).ok_or(ChamferError::EmptyTarget)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChamferMode {
    /// Plain sums over both directions.
    #[default]
    Sum,
    /// Each direction averaged over its point count.
    Mean,
}

impl ChamferMode {
    fn weights(self, a: usize, b: usize) -> (f64, f64) {
        match self {
            Self::Sum => (1.0, 1.0),
            Self::Mean => (1.0 / a as f64, 1.0 / b as f64),
        }
    }
}

fn one_sided(from: &[Vec3], to: &KdTree) -> f64 {
    from.iter().map(|p| to.nearest(p).map_or(0.0, |(_, d)| d)).sum()
}

pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64, ChamferError> {
    chamfer_distance_with(a, b, ChamferMode::Sum)
}

pub fn chamfer_distance_with(a: &PointCloud, b: &PointCloud, mode: ChamferMode) -> Result<f64, ChamferError> {
    if a.is_empty() || b.is_empty() {
        return Err(ChamferError::EmptyCloud);
    }
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    let (wa, wb) = mode.weights(a.len(), b.len());
    Ok(wa * one_sided(&a.points, &tb) + wb * one_sided(&b.points, &ta))
}

/// A scan with its nearest-neighbour index, built once and reused across
/// refinement steps.
#[derive(Debug, Clone)]
pub struct IndexedScan {
    tree: KdTree,
}

impl IndexedScan {
    pub fn new(scan: &PointCloud) -> Self {
        Self {
            tree: KdTree::build(&scan.points),
        }
    }

    pub fn points(&self) -> &[Vec3] {
        self.tree.points()
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }
}

/// Loss, gradient and a diagonal curvature estimate with respect to
/// `(translation, yaw)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamferGradient {
    pub loss: f64,
    pub d_translation: Vec3,
    pub d_yaw: f64,
    /// Gauss-Newton diagonal for the translation block (same on every axis).
    pub curvature_translation: f64,
    pub curvature_yaw: f64,
}

/// Chamfer loss between the posed shape and the scan, with its gradient
/// taken at fixed nearest-neighbour correspondences.
pub fn chamfer_gradient(
    shape_points: &[Vec3],
    pose: &Pose4DoF,
    scan: &IndexedScan,
    mode: ChamferMode,
) -> Result<ChamferGradient, ChamferError> {
    if shape_points.is_empty() || scan.is_empty() {
        return Err(ChamferError::EmptyCloud);
    }
    let r = yaw_rotation(pose.yaw());
    let dr = yaw_rotation_derivative(pose.yaw());
    let posed: Vec<Vec3> = shape_points.iter().map(|p| r * p + pose.translation).collect();
    let (wa, wb) = mode.weights(posed.len(), scan.len());

    let mut loss = 0.0;
    let mut d_t = Vec3::zeros();
    let mut d_yaw = 0.0;
    let mut curv_yaw = 0.0;

    // shape → scan
    for (x, p) in posed.iter().zip(shape_points) {
        let (j, d) = scan.tree().nearest(x).ok_or(ChamferError::EmptyTarget)?;
        let residual = x - scan.points()[j];
        let lever = dr * p;
        loss += wa * d;
        d_t += 2.0 * wa * residual;
        d_yaw += 2.0 * wa * residual.dot(&lever);
        curv_yaw += 2.0 * wa * lever.norm_squared();
    }
    // scan → shape
    let model_tree = KdTree::build(&posed);
    for y in scan.points() {
        let (i, d) = model_tree.nearest(y).ok_or(ChamferError::EmptyTarget)?;
        let residual = posed[i] - y;
        let lever = dr * shape_points[i];
        loss += wb * d;
        d_t += 2.0 * wb * residual;
        d_yaw += 2.0 * wb * residual.dot(&lever);
        curv_yaw += 2.0 * wb * lever.norm_squared();
    }
    Ok(ChamferGradient {
        loss,
        d_translation: d_t,
        d_yaw,
        curvature_translation: 2.0 * (wa * posed.len() as f64 + wb * scan.len() as f64),
        curvature_yaw: curv_yaw,
    })
}

/// Chamfer loss of the posed shape against an indexed scan.
pub fn chamfer_loss(
    shape_points: &[Vec3],
    pose: &Pose4DoF,
    scan: &IndexedScan,
    mode: ChamferMode,
) -> Result<f64, ChamferError> {
    if shape_points.is_empty() || scan.is_empty() {
        return Err(ChamferError::EmptyCloud);
    }
    let posed = transform_to_scene(shape_points, pose);
    let (wa, wb) = mode.weights(posed.len(), scan.len());
    let model_tree = KdTree::build(&posed.points);
    Ok(wa * one_sided(&posed.points, scan.tree()) + wb * one_sided(scan.points(), &model_tree))
}

/// Parameters of the angular z-buffer used for hidden-point removal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityParams {
    /// Cell footprint in meters at the cloud's median range.
    pub cell_size: f64,
    /// Points this far behind the nearest point of their cell stay visible.
    pub depth_margin: f64,
}

impl Default for VisibilityParams {
    fn default() -> Self {
        Self {
            cell_size: 0.3,
            depth_margin: 0.3,
        }
    }
}

/// Marks the points of a sensor-frame cloud that are not hidden behind
/// other points of the same cloud, using an azimuth/elevation z-buffer
/// centered on the sensor origin.
pub fn visible_from_origin(points: &[Vec3], params: &VisibilityParams) -> Vec<bool> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut ranges: Vec<f64> = points.iter().map(|p| p.norm()).collect();
    let mut sorted = ranges.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2].max(1e-3);
    let cell_angle = params.cell_size / median;
    let key = |p: &Vec3| {
        let azimuth = p.x.atan2(p.z);
        let elevation = p.y.atan2(p.x.hypot(p.z));
        (
            (azimuth / cell_angle).floor() as i64,
            (elevation / cell_angle).floor() as i64,
        )
    };
    let mut nearest: HashMap<(i64, i64), f64> = HashMap::new();
    for (p, r) in points.iter().zip(&ranges) {
        let e = nearest.entry(key(p)).or_insert(f64::INFINITY);
        if *r < *e {
            *e = *r;
        }
    }
    for (p, r) in points.iter().zip(ranges.iter_mut()) {
        let front = nearest[&key(p)];
        *r = if *r <= front + params.depth_margin { 1.0 } else { 0.0 };
    }
    ranges.into_iter().map(|flag| flag > 0.5).collect()
}

/// Object-frame points of a shape that face the sensor at the given pose.
pub fn visible_shape_points(shape_points: &[Vec3], pose: &Pose4DoF, params: &VisibilityParams) -> Vec<Vec3> {
    let posed = transform_to_scene(shape_points, pose);
    visible_from_origin(&posed.points, params)
        .into_iter()
        .zip(shape_points)
        .filter_map(|(keep, p)| keep.then_some(*p))
        .collect()
}
