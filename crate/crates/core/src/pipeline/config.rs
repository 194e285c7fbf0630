//! Flat `key = value` configuration files.

use std::path::PathBuf;

use crate::chamfer::{ChamferMode, VisibilityParams};
use crate::motion::{CrossingAxis, CrossingDenominator, DistanceMode};
use crate::scenario::{NoiseSchedule, ScenarioConfig};

use super::io::ParseError;
use super::{PipelineConfig, PoseFrame};

/// `(line, key, value)` triples; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ParseError {
            line: i + 1,
            message: format!("expected `key = value`, found {line:?}"),
        })?;
        out.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn flag(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("{key}: expected a boolean, found {value:?}")),
    }
}

impl PipelineConfig {
    /// Applies one setting; `scenario.*` keys are ignored here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let r = &mut self.refinement;
        match key {
            "iterations" => self.iterations = num(key, value)?,
            "motion_model" => self.motion_model = value.parse()?,
            "temporal" => self.temporal = flag(key, value)?,
            "lambda_t" => r.lambda_t = num(key, value)?,
            "lambda_r" => r.lambda_r = num(key, value)?,
            "steps" => r.steps = num(key, value)?,
            "step_size_translation" => r.step_size_translation = num(key, value)?,
            "step_size_yaw" => r.step_size_yaw = num(key, value)?,
            "max_halvings" => r.max_halvings = num(key, value)?,
            "chamfer_mode" => {
                r.chamfer_mode = match value {
                    "sum" => ChamferMode::Sum,
                    "mean" => ChamferMode::Mean,
                    _ => return Err(format!("{key}: expected sum or mean, found {value:?}")),
                }
            }
            "visibility" => {
                r.visibility = flag(key, value)?.then(VisibilityParams::default);
            }
            "visibility_refresh" => r.visibility_refresh = num(key, value)?,
            "gate_radius" => self.tracker.gate_radius = num(key, value)?,
            "max_age" => self.tracker.max_age = num(key, value)?,
            "min_frames" => self.motion.min_frames = num(key, value)?,
            "distance_threshold" => self.motion.distance_threshold = num(key, value)?,
            "zero_crossing_ratio" => self.motion.zero_crossing_ratio = num(key, value)?,
            "deadband" => self.motion.deadband = num(key, value)?,
            "distance_mode" => {
                self.motion.distance_mode = match value {
                    "combined" => DistanceMode::Combined,
                    "per_axis" => DistanceMode::PerAxis,
                    _ => return Err(format!("{key}: expected combined or per_axis, found {value:?}")),
                }
            }
            "crossing_axis" => {
                self.motion.crossing_axis = match value {
                    "dominant" => CrossingAxis::Dominant,
                    "either" => CrossingAxis::EitherAxis,
                    _ => return Err(format!("{key}: expected dominant or either, found {value:?}")),
                }
            }
            "crossing_denominator" => {
                self.motion.crossing_denominator = match value {
                    "velocity_pairs" => CrossingDenominator::VelocityPairs,
                    "observations" => CrossingDenominator::Observations,
                    _ => {
                        return Err(format!(
                            "{key}: expected velocity_pairs or observations, found {value:?}"
                        ))
                    }
                }
            }
            "segment_length" => self.moving.segment_length = num(key, value)?,
            "ransac_threshold" => self.moving.ransac.inlier_threshold = num(key, value)?,
            "ransac_iterations" => self.moving.ransac.iterations = num(key, value)?,
            "histogram_bins" => {
                self.histogram_bins = num(key, value)?;
                self.moving.histogram_bins = self.histogram_bins;
            }
            "seed" => self.moving.ransac.seed = num(key, value)?,
            "frame_rate" => self.frame_rate = num(key, value)?,
            "ground_height" => self.ground_height = num(key, value)?,
            "ground_margin" => self.ground_margin = num(key, value)?,
            "scan_gate" => self.scan_gate = num(key, value)?,
            "mask_match_iou" => self.mask_match_iou = num(key, value)?,
            "ground_clearance" => self.ground_clearance = num(key, value)?,
            "iou_threshold" => self.iou_threshold = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "pose_frame" => {
                self.pose_frame = match value {
                    "camera" => PoseFrame::Camera,
                    "imu" => PoseFrame::Imu,
                    _ => return Err(format!("{key}: expected camera or imu, found {value:?}")),
                }
            }
            "input" => self.input = PathBuf::from(value),
            "output" => self.output = PathBuf::from(value),
            "shape_space" => self.shape_space = Some(PathBuf::from(value)),
            k if k.starts_with("scenario.") => {}
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ParseError> {
        for (line, key, value) in parse_key_values(text)? {
            self.set(&key, &value).map_err(|message| ParseError { line, message })?;
        }
        Ok(())
    }
}

/// Applies the `scenario.*` keys of a config file to a scenario.
pub fn apply_scenario_text(cfg: &mut ScenarioConfig, text: &str) -> Result<(), ParseError> {
    for (line, key, value) in parse_key_values(text)? {
        let Some(key) = key.strip_prefix("scenario.") else {
            continue;
        };
        let err = |message: String| ParseError { line, message };
        let v = value.as_str();
        match key {
            "frames" => cfg.frame_count = num(key, v).map_err(err)?,
            "frame_rate" => cfg.frame_rate = num(key, v).map_err(err)?,
            "sigma_t" => cfg.noise.sigma_t = num(key, v).map_err(err)?,
            "sigma_yaw" => cfg.noise.sigma_yaw = num(key, v).map_err(err)?,
            "false_negative_rate" => cfg.noise.false_negative_rate = num(key, v).map_err(err)?,
            "schedule" => {
                cfg.schedule = match v {
                    "halving" => NoiseSchedule::Halving,
                    "constant" => NoiseSchedule::Constant,
                    _ => return Err(err(format!("schedule: expected halving or constant, found {v:?}"))),
                }
            }
            "lidar_dropout" => cfg.lidar.dropout = num(key, v).map_err(err)?,
            "lidar_noise" => cfg.lidar.noise_sigma = num(key, v).map_err(err)?,
            "ground_points" => cfg.lidar.ground_points = num(key, v).map_err(err)?,
            "shape_points" => cfg.shape.point_count = num(key, v).map_err(err)?,
            "latent_dim" => cfg.shape.latent_dim = num(key, v).map_err(err)?,
            _ => return Err(err(format!("unknown key \"scenario.{key}\""))),
        }
    }
    Ok(())
}
