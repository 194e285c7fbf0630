//! Parametric box-with-cabin car surfaces sampled at fixed surface
//! coordinates, so every generated model is in point correspondence.
//!
//! Object frame: x along the heading, y down, z lateral; ground contact is at
//! the largest y.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_shape_space, PcaFit, ShapeError};
use crate::geometry::Vec3;

const TEMPLATE_SEED: u64 = 0x5EED_CA25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarParams {
    pub length: f64,
    pub width: f64,
    pub body_height: f64,
    pub cabin_height: f64,
    /// Cabin base length as a fraction of `length`.
    pub cabin_fraction: f64,
    /// Cabin center offset along x as a fraction of `length`.
    pub cabin_offset: f64,
    /// Horizontal run of the windshield and rear window.
    pub front_slant: f64,
    pub rear_slant: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        Self {
            length: 4.3,
            width: 1.76,
            body_height: 0.8,
            cabin_height: 0.65,
            cabin_fraction: 0.5,
            cabin_offset: -0.05,
            front_slant: 0.55,
            rear_slant: 0.3,
        }
    }
}

impl CarParams {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            length: rng.random_range(3.8..4.9),
            width: rng.random_range(1.6..1.9),
            body_height: rng.random_range(0.65..0.95),
            cabin_height: rng.random_range(0.45..0.75),
            cabin_fraction: rng.random_range(0.4..0.6),
            cabin_offset: rng.random_range(-0.15..0.05),
            front_slant: rng.random_range(0.3..0.7),
            rear_slant: rng.random_range(0.1..0.5),
        }
    }

    pub fn height(&self) -> f64 {
        self.body_height + self.cabin_height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Face {
    BodyFront,
    BodyBack,
    BodyLeft,
    BodyRight,
    Hood,
    Trunk,
    Windshield,
    RearWindow,
    CabinLeft,
    CabinRight,
    Roof,
}

const FACES: [Face; 11] = [
    Face::BodyFront,
    Face::BodyBack,
    Face::BodyLeft,
    Face::BodyRight,
    Face::Hood,
    Face::Trunk,
    Face::Windshield,
    Face::RearWindow,
    Face::CabinLeft,
    Face::CabinRight,
    Face::Roof,
];

/// Fixed surface coordinates `(face, u, v)` defining the correspondence.
#[derive(Debug, Clone)]
pub struct CarTemplate {
    samples: Vec<(Face, f64, f64)>,
}

impl CarTemplate {
    /// Allocates `point_count` samples across faces in proportion to the
    /// face areas of the reference car.
    pub fn new(point_count: usize) -> Self {
        let reference = CarParams::default();
        let areas: Vec<f64> = FACES.iter().map(|f| face_area(&reference, *f)).collect();
        let total: f64 = areas.iter().sum();
        let mut counts: Vec<usize> = areas
            .iter()
            .map(|a| ((a / total) * point_count as f64).floor() as usize)
            .collect();
        // hand out the rounding remainder to the largest faces first
        let mut by_area: Vec<usize> = (0..FACES.len()).collect();
        by_area.sort_by(|&a, &b| areas[b].total_cmp(&areas[a]));
        let mut missing = point_count - counts.iter().sum::<usize>();
        for &i in by_area.iter().cycle() {
            if missing == 0 {
                break;
            }
            counts[i] += 1;
            missing -= 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
        let mut samples = Vec::with_capacity(point_count);
        for (face, count) in FACES.iter().zip(counts) {
            for _ in 0..count {
                samples.push((*face, rng.random::<f64>(), rng.random::<f64>()));
            }
        }
        Self { samples }
    }

    pub fn point_count(&self) -> usize {
        self.samples.len()
    }

    /// Surface points of a car with the given parameters, centered on the
    /// middle of its bounding box.
    pub fn points(&self, car: &CarParams) -> Vec<Vec3> {
        self.samples
            .iter()
            .map(|&(face, u, v)| surface_point(car, face, u, v))
            .collect()
    }
}

struct Layout {
    half_length: f64,
    half_width: f64,
    cabin_half_width: f64,
    y_ground: f64,
    y_belt: f64,
    y_roof: f64,
    cabin_back: f64,
    cabin_front: f64,
}

fn layout(car: &CarParams) -> Layout {
    let h = car.height();
    let cabin_len = car.cabin_fraction * car.length;
    let center = car.cabin_offset * car.length;
    let half_length = car.length / 2.0;
    Layout {
        half_length,
        half_width: car.width / 2.0,
        cabin_half_width: 0.45 * car.width,
        y_ground: h / 2.0,
        y_belt: h / 2.0 - car.body_height,
        y_roof: -h / 2.0,
        cabin_back: (center - cabin_len / 2.0).max(-half_length),
        cabin_front: (center + cabin_len / 2.0).min(half_length),
    }
}

fn face_area(car: &CarParams, face: Face) -> f64 {
    let l = layout(car);
    let roof_len = (l.cabin_front - car.front_slant) - (l.cabin_back + car.rear_slant);
    let cw = 2.0 * l.cabin_half_width;
    match face {
        Face::BodyFront | Face::BodyBack => car.width * car.body_height,
        Face::BodyLeft | Face::BodyRight => car.length * car.body_height,
        Face::Hood => (l.half_length - l.cabin_front) * car.width,
        Face::Trunk => (l.cabin_back + l.half_length) * car.width,
        Face::Windshield => cw * car.front_slant.hypot(car.cabin_height),
        Face::RearWindow => cw * car.rear_slant.hypot(car.cabin_height),
        Face::CabinLeft | Face::CabinRight => 0.5 * ((l.cabin_front - l.cabin_back) + roof_len) * car.cabin_height,
        Face::Roof => roof_len * cw,
    }
}

fn surface_point(car: &CarParams, face: Face, u: f64, v: f64) -> Vec3 {
    let l = layout(car);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let body_y = lerp(l.y_belt, l.y_ground, v);
    let cabin_y = lerp(l.y_belt, l.y_roof, v);
    let z_body = lerp(-l.half_width, l.half_width, u);
    let z_cabin = lerp(-l.cabin_half_width, l.cabin_half_width, u);
    let roof_back = l.cabin_back + car.rear_slant;
    let roof_front = l.cabin_front - car.front_slant;
    match face {
        Face::BodyFront => Vec3::new(l.half_length, body_y, z_body),
        Face::BodyBack => Vec3::new(-l.half_length, body_y, z_body),
        Face::BodyLeft => Vec3::new(lerp(-l.half_length, l.half_length, u), body_y, -l.half_width),
        Face::BodyRight => Vec3::new(lerp(-l.half_length, l.half_length, u), body_y, l.half_width),
        Face::Hood => Vec3::new(
            lerp(l.cabin_front, l.half_length, u),
            l.y_belt,
            lerp(-l.half_width, l.half_width, v),
        ),
        Face::Trunk => Vec3::new(
            lerp(-l.half_length, l.cabin_back, u),
            l.y_belt,
            lerp(-l.half_width, l.half_width, v),
        ),
        Face::Windshield => Vec3::new(lerp(l.cabin_front, roof_front, v), cabin_y, z_cabin),
        Face::RearWindow => Vec3::new(lerp(l.cabin_back, roof_back, v), cabin_y, z_cabin),
        Face::CabinLeft | Face::CabinRight => {
            let x = lerp(lerp(l.cabin_back, roof_back, v), lerp(l.cabin_front, roof_front, v), u);
            let z = if face == Face::CabinLeft {
                -l.cabin_half_width
            } else {
                l.cabin_half_width
            };
            Vec3::new(x, cabin_y, z)
        }
        Face::Roof => Vec3::new(
            lerp(roof_back, roof_front, u),
            l.y_roof,
            lerp(-l.cabin_half_width, l.cabin_half_width, v),
        ),
    }
}

/// `count` random cars from one seed, all sampled on the same template.
pub fn sample_car_models(template: &CarTemplate, count: usize, seed: u64) -> Vec<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| template.points(&CarParams::sample(&mut rng)))
        .collect()
}

/// Shape space fitted to `model_count` procedural cars.
pub fn car_shape_space(
    point_count: usize,
    latent_dim: usize,
    model_count: usize,
    seed: u64,
) -> Result<PcaFit, ShapeError> {
    let template = CarTemplate::new(point_count);
    build_shape_space(&sample_car_models(&template, model_count, seed), latent_dim)
}
