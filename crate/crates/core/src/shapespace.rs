//! Linear (PCA) shape space over car point clouds in fixed correspondence.
//!
//! A [`ShapeSpace`] holds a mean cloud and `K` orthonormal directions in the
//! flattened `3P` coordinate space. Decoding a [`ShapeCode`] is affine in the
//! code; encoding is the orthogonal projection onto that affine subspace.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::geometry::Vec3;

pub mod procedural;

const MAGIC: &[u8; 4] = b"PCAS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("need at least 2 models and K < model count (got {models} models, K = {k})")]
    InsufficientModels { models: usize, k: usize },
    #[error("model {index} has {got} points, expected {expected}")]
    CorrespondenceMismatch { index: usize, expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed shape file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Latent shape coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCode(pub Vec<f64>);

impl ShapeCode {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpace {
    mean: Vec<Vec3>,
    /// `K` rows of length `3P`, flattened as `[x0, y0, z0, x1, ...]`.
    components: Vec<Vec<f64>>,
}

/// Result of [`build_shape_space`]: the space plus the variance captured by
/// each kept component, in descending order.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub space: ShapeSpace,
    pub variances: Vec<f64>,
}

/// Fits a `k`-dimensional PCA shape space to models in point correspondence.
///
/// Each model is first translated so its centroid sits at the origin; the
/// mean is the pointwise average of the centered models. Components are the
/// top-`k` eigenvectors of the centered data covariance; directions with zero
/// variance are completed to an orthonormal set.
pub fn build_shape_space(models: &[Vec<Vec3>], k: usize) -> Result<PcaFit, ShapeError> {
    let n = models.len();
    if n < 2 || k >= n || k == 0 {
        return Err(ShapeError::InsufficientModels { models: n, k });
    }
    let p = models[0].len();
    if p == 0 {
        return Err(ShapeError::CorrespondenceMismatch {
            index: 0,
            expected: 1,
            got: 0,
        });
    }
    for (index, m) in models.iter().enumerate() {
        if m.len() != p {
            return Err(ShapeError::CorrespondenceMismatch {
                index,
                expected: p,
                got: m.len(),
            });
        }
    }
    let dim = 3 * p;
    let models: Vec<Vec<Vec3>> = models
        .iter()
        .map(|m| {
            let c = m.iter().sum::<Vec3>() / p as f64;
            m.iter().map(|q| q - c).collect()
        })
        .collect();
    let mut mean = vec![Vec3::zeros(); p];
    for m in &models {
        for (acc, q) in mean.iter_mut().zip(m) {
            *acc += q;
        }
    }
    for q in &mut mean {
        *q /= n as f64;
    }

    let mut data = DMatrix::<f64>::zeros(n, dim);
    for (r, m) in models.iter().enumerate() {
        for (j, (q, mu)) in m.iter().zip(&mean).enumerate() {
            let d = q - mu;
            data[(r, 3 * j)] = d.x;
            data[(r, 3 * j + 1)] = d.y;
            data[(r, 3 * j + 2)] = d.z;
        }
    }

    // Eigen-decompose the small n×n Gram matrix instead of the 3P×3P covariance.
    let gram = &data * data.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.amax().max(1.0);

    let mut components: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let lambda = eig.eigenvalues[idx].max(0.0);
        variances.push(lambda / (n - 1) as f64);
        if lambda <= 1e-10 * scale {
            continue;
        }
        let v = eig.eigenvectors.column(idx);
        let mut c = data.transpose() * v;
        let before = c.norm();
        // two Gram-Schmidt passes against earlier components to clean up round-off
        for _ in 0..2 {
            for prev in &components {
                let proj = prev.dot(&c);
                c -= prev * proj;
            }
        }
        let norm = c.norm();
        if norm > 1e-6 * before {
            components.push(c / norm);
        }
    }
    // Complete with standard-basis directions when the data has lower rank,
    // keeping clear of rigid translations so encoding stays translation-blind.
    let translations: Vec<DVector<f64>> = (0..3)
        .map(|axis| DVector::from_fn(dim, |i, _| if i % 3 == axis { 1.0 } else { 0.0 }).normalize())
        .collect();
    let mut basis = 0;
    while components.len() < k && basis < dim {
        let mut c = DVector::<f64>::zeros(dim);
        c[basis] = 1.0;
        basis += 1;
        for _ in 0..2 {
            for prev in translations.iter().chain(&components) {
                let proj = prev.dot(&c);
                c -= prev * proj;
            }
        }
        let norm = c.norm();
        if norm > 1e-6 {
            components.push(c / norm);
        }
    }

    let components = components.into_iter().map(|c| c.iter().copied().collect()).collect();
    Ok(PcaFit {
        space: ShapeSpace { mean, components },
        variances,
    })
}

impl ShapeSpace {
    /// Assembles a space from parts, checking that the dimensions agree.
    pub fn from_parts(mean: Vec<Vec3>, components: Vec<Vec<f64>>) -> Result<Self, ShapeError> {
        let dim = 3 * mean.len();
        for c in &components {
            if c.len() != dim {
                return Err(ShapeError::DimensionMismatch {
                    expected: dim,
                    got: c.len(),
                });
            }
        }
        Ok(Self { mean, components })
    }

    pub fn latent_dim(&self) -> usize {
        self.components.len()
    }

    pub fn point_count(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_shape(&self) -> &[Vec3] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Largest deviation of `C·Cᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn decode(&self, code: &ShapeCode) -> Result<Vec<Vec3>, ShapeError> {
        if code.dim() != self.latent_dim() {
            return Err(ShapeError::DimensionMismatch {
                expected: self.latent_dim(),
                got: code.dim(),
            });
        }
        let mut out = self.mean.clone();
        for (coef, comp) in code.0.iter().zip(&self.components) {
            if *coef == 0.0 {
                continue;
            }
            for (j, q) in out.iter_mut().enumerate() {
                q.x += coef * comp[3 * j];
                q.y += coef * comp[3 * j + 1];
                q.z += coef * comp[3 * j + 2];
            }
        }
        Ok(out)
    }

    pub fn encode(&self, cloud: &[Vec3]) -> Result<ShapeCode, ShapeError> {
        if cloud.len() != self.point_count() {
            return Err(ShapeError::DimensionMismatch {
                expected: self.point_count(),
                got: cloud.len(),
            });
        }
        let coefficients = self
            .components
            .iter()
            .map(|comp| {
                cloud
                    .iter()
                    .zip(&self.mean)
                    .enumerate()
                    .map(|(j, (q, mu))| {
                        let d = q - mu;
                        d.x * comp[3 * j] + d.y * comp[3 * j + 1] + d.z * comp[3 * j + 2]
                    })
                    .sum()
            })
            .collect();
        Ok(ShapeCode(coefficients))
    }

    /// Writes the little-endian binary form: magic, version, K, P, mean, components.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ShapeError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.latent_dim() as u32).to_le_bytes())?;
        w.write_all(&(self.point_count() as u32).to_le_bytes())?;
        for q in &self.mean {
            for v in q.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for c in &self.components {
            for v in c {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ShapeError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ShapeError::Format("bad magic".into()));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32, ShapeError> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(ShapeError::Format(format!("unsupported version {version}")));
        }
        let k = read_u32(&mut r)? as usize;
        let p = read_u32(&mut r)? as usize;
        let mut buf = [0u8; 8];
        let mut read_f64 = |r: &mut R| -> Result<f64, ShapeError> {
            r.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        };
        let mut mean = Vec::with_capacity(p);
        for _ in 0..p {
            let x = read_f64(&mut r)?;
            let y = read_f64(&mut r)?;
            let z = read_f64(&mut r)?;
            mean.push(Vec3::new(x, y, z));
        }
        let mut components = Vec::with_capacity(k);
        for _ in 0..k {
            let mut c = Vec::with_capacity(3 * p);
            for _ in 0..3 * p {
                c.push(read_f64(&mut r)?);
            }
            components.push(c);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ShapeError::Format("trailing bytes".into()));
        }
        Self::from_parts(mean, components)
    }

    pub fn save(&self, path: &Path) -> Result<(), ShapeError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ShapeError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Axis-aligned extent of an object-frame cloud: `(center, size)`.
pub fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    ((lo + hi) / 2.0, hi - lo)
}

pub fn write_ply<W: Write>(points: &[Vec3], mut w: W) -> io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    writeln!(w, "end_header")?;
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn read_ply<R: BufRead>(r: R) -> Result<Vec<Vec3>, ShapeError> {
    let mut lines = r.lines();
    let mut count = None;
    let mut header_ok = false;
    for line in lines.by_ref() {
        let line = line?;
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("element vertex") {
            count = Some(
                rest.trim()
                    .parse::<usize>()
                    .map_err(|e| ShapeError::Format(format!("vertex count: {e}")))?,
            );
        } else if line.starts_with("format") && line != "format ascii 1.0" {
            return Err(ShapeError::Format(format!("unsupported {line}")));
        } else if line == "end_header" {
            header_ok = true;
            break;
        }
    }
    let count = match (header_ok, count) {
        (true, Some(c)) => c,
        _ => return Err(ShapeError::Format("incomplete PLY header".into())),
    };
    let mut points = Vec::with_capacity(count);
    for line in lines.take(count) {
        let line = line?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ShapeError::Format(format!("vertex: {e}")))?;
        if vals.len() < 3 {
            return Err(ShapeError::Format(format!("short vertex line: {line}")));
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
    }
    if points.len() != count {
        return Err(ShapeError::Format("fewer vertices than declared".into()));
    }
    Ok(points)
}
