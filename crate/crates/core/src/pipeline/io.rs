//! File formats of a sequence directory: KITTI labels and detections,
//! velodyne scans, calibration, poses and instance-label images.

use std::fs;
use std::io::{self, BufWriter, Cursor};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use thiserror::Error;

use crate::chamfer::LabelImage;
use crate::eval::Box3D;
use crate::geometry::{wrap_angle, CameraIntrinsics, GeometryError, Mat3, RigidTransform, Vec3};
use crate::shapespace::ShapeCode;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: invalid calibration: {message}")]
    Calibration { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl IoError {
    pub fn path(&self) -> &Path {
        match self {
            Self::Io { path, .. }
            | Self::Parse { path, .. }
            | Self::Calibration { path, .. }
            | Self::Image { path, .. } => path,
        }
    }
}

/// Line-numbered parse failure before a path is attached.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }

    pub fn with_path(self, path: &Path) -> IoError {
        IoError::Parse {
            path: path.to_path_buf(),
            line: self.line,
            message: self.message,
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn frame_file(dir: &Path, frame: usize, extension: &str) -> PathBuf {
    dir.join(format!("{frame:06}.{extension}"))
}

/// Observation angle of a box as seen from the camera.
fn alpha(b: &Box3D) -> f64 {
    wrap_angle(b.yaw - b.center.x.atan2(b.center.z))
}

fn label_fields(b: &Box3D) -> String {
    format!(
        "Car -1 -1 {} -1 -1 -1 -1 {} {} {} {} {} {} {} {}",
        alpha(b),
        b.height,
        b.width,
        b.length,
        b.center.x,
        b.center.y,
        b.center.z,
        b.yaw,
        b.score
    )
}

/// KITTI label text, one 16-field line per box.
pub fn format_labels(boxes: &[Box3D]) -> String {
    boxes.iter().map(|b| label_fields(b) + "\n").collect()
}

fn parse_floats(fields: &[&str], line: usize) -> Result<Vec<f64>, ParseError> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| ParseError::at(line, format!("not a number: {f:?}")))
        })
        .collect()
}

fn parse_box(fields: &[&str], line: usize) -> Result<Box3D, ParseError> {
    let v = parse_floats(&fields[1..16], line)?;
    let (h, w, l) = (v[7], v[8], v[9]);
    if !(h > 0.0 && w > 0.0 && l > 0.0) {
        return Err(ParseError::at(line, "box dimensions must be positive"));
    }
    Ok(Box3D::new(Vec3::new(v[10], v[11], v[12]), l, w, h, v[13], v[14]))
}

/// Parses KITTI label text; only `Car` lines are kept.
pub fn parse_labels(text: &str) -> Result<Vec<Box3D>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 16 {
            return Err(ParseError::at(
                i + 1,
                format!("expected 16 fields, found {}", fields.len()),
            ));
        }
        if fields[0] != "Car" {
            continue;
        }
        out.push(parse_box(&fields, i + 1)?);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, boxes: &[Box3D]) -> Result<(), IoError> {
    write_text(path, &format_labels(boxes))
}

pub fn read_labels(path: &Path) -> Result<Vec<Box3D>, IoError> {
    parse_labels(&read_text(path)?).map_err(|e| e.with_path(path))
}

/// A detector output: a KITTI box followed by its shape code.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub boxed: Box3D,
    pub shape_code: ShapeCode,
}

pub fn format_detections(detections: &[DetectionRecord]) -> String {
    let mut s = String::new();
    for d in detections {
        s.push_str(&label_fields(&d.boxed));
        for c in &d.shape_code.0 {
            s.push(' ');
            s.push_str(&c.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 16 {
            return Err(ParseError::at(
                i + 1,
                format!("expected at least 16 fields, found {}", fields.len()),
            ));
        }
        let boxed = parse_box(&fields, i + 1)?;
        let code = parse_floats(&fields[16..], i + 1)?;
        if let Some(first) = out.first().map(|d: &DetectionRecord| d.shape_code.dim()) {
            if first != code.len() {
                return Err(ParseError::at(i + 1, "shape code length differs from previous lines"));
            }
        }
        out.push(DetectionRecord {
            boxed,
            shape_code: ShapeCode(code),
        });
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>, IoError> {
    parse_detections(&read_text(path)?).map_err(|e| e.with_path(path))
}

/// KITTI velodyne scan: little-endian `f32` quadruples `(x, y, z, r)`.
pub fn encode_velodyne(points: &[Vec3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_velodyne(bytes: &[u8]) -> Result<Vec<Vec3>, String> {
    if !bytes.len().is_multiple_of(16) {
        return Err(format!("{} bytes is not a whole number of points", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]) as f64;
            Vec3::new(f(0), f(4), f(8))
        })
        .collect())
}

pub fn read_velodyne(path: &Path) -> Result<Vec<Vec3>, IoError> {
    let bytes = fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_velodyne(&bytes).map_err(|message| IoError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    })
}

pub fn write_velodyne(path: &Path, points: &[Vec3]) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, encode_velodyne(points)).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub const DEFAULT_IMAGE_SIZE: (u32, u32) = (1242, 375);

/// Sensor calibration of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    /// Velodyne → rectified camera.
    pub velo_to_cam: RigidTransform,
    /// IMU → velodyne, when the poses are given in the IMU frame.
    pub imu_to_velo: Option<RigidTransform>,
}

impl Calibration {
    /// Text in the KITTI `calib.txt` layout, plus an `image_size` line.
    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let p2 = [k.fx, 0.0, k.cx, 0.0, 0.0, k.fy, k.cy, 0.0, 0.0, 0.0, 1.0, 0.0];
        let r0 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut s = format!(
            "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
            join(&p2),
            join(&r0),
            join(&self.velo_to_cam.to_row_major())
        );
        if let Some(imu) = &self.imu_to_velo {
            s.push_str(&format!("Tr_imu_to_velo: {}\n", join(&imu.to_row_major())));
        }
        s.push_str(&format!("image_size: {} {}\n", k.image_width, k.image_height));
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, values) = line
                .split_once(':')
                .ok_or_else(|| format!("line {}: expected `key: values`", i + 1))?;
            let values: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| format!("line {}: not a number: {v:?}", i + 1)))
                .collect::<Result<_, _>>()?;
            entries.insert(key.trim().to_string(), values);
        }
        let get = |key: &str, len: usize| -> Result<Option<&Vec<f64>>, String> {
            match entries.get(key) {
                Some(v) if v.len() == len => Ok(Some(v)),
                Some(v) => Err(format!("{key} has {} values, expected {len}", v.len())),
                None => Ok(None),
            }
        };
        let p2 = get("P2", 12)?.ok_or("missing P2")?;
        let (width, height) = match get("image_size", 2)? {
            Some(v) => (v[0] as u32, v[1] as u32),
            None => DEFAULT_IMAGE_SIZE,
        };
        let intrinsics = CameraIntrinsics::new(p2[0], p2[5], p2[2], p2[6], width, height).map_err(|e| e.to_string())?;
        let rigid = |key: &str, v: &[f64]| -> Result<RigidTransform, String> {
            let arr: [f64; 12] = v.try_into().expect("length checked");
            let t = RigidTransform::from_row_major(&arr);
            RigidTransform::new(t.rotation, t.translation).map_err(|e: GeometryError| format!("{key}: {e}"))
        };
        let tr = get("Tr_velo_to_cam", 12)?.ok_or("missing Tr_velo_to_cam")?;
        let mut velo_to_cam = rigid("Tr_velo_to_cam", tr)?;
        if let Some(r0) = get("R0_rect", 9)? {
            let r = Mat3::from_row_slice(r0);
            let rect = RigidTransform::new(r, Vec3::zeros()).map_err(|e| format!("R0_rect: {e}"))?;
            velo_to_cam = rect.compose(&velo_to_cam);
        }
        let imu_to_velo = get("Tr_imu_to_velo", 12)?
            .map(|v| rigid("Tr_imu_to_velo", v))
            .transpose()?;
        Ok(Self {
            intrinsics,
            velo_to_cam,
            imu_to_velo,
        })
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::parse(&read_text(path)?).map_err(|message| IoError::Calibration {
            path: path.to_path_buf(),
            message,
        })
    }

    /// IMU → camera, if the IMU calibration is present.
    pub fn imu_to_cam(&self) -> Option<RigidTransform> {
        self.imu_to_velo.map(|imu| self.velo_to_cam.compose(&imu))
    }
}

/// Binary PGM of a label image.
pub fn encode_label_image(labels: &LabelImage) -> Vec<u8> {
    let mut out = Vec::new();
    PnmEncoder::new(BufWriter::new(&mut out))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&labels.ids, labels.width, labels.height, ExtendedColorType::L8)
        .expect("in-memory PGM encoding");
    out
}

/// Decodes a PGM label image taken for a camera image `image_width` pixels
/// wide.
pub fn decode_label_image(bytes: &[u8], image_width: u32) -> Result<LabelImage, String> {
    let img = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Pnm)
        .decode()
        .map_err(|e| e.to_string())?
        .to_luma8();
    let (width, height) = img.dimensions();
    Ok(LabelImage {
        width,
        height,
        scale: width as f64 / image_width as f64,
        ids: img.into_raw(),
    })
}

pub fn read_label_image(path: &Path, image_width: u32) -> Result<LabelImage, IoError> {
    let bytes = fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_label_image(&bytes, image_width).map_err(|message| IoError::Image {
        path: path.to_path_buf(),
        message,
    })
}

pub fn write_label_image(path: &Path, labels: &LabelImage) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, encode_label_image(labels)).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}
