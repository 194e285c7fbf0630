use std::collections::HashMap;
use std::path::Path;

use nalgebra::Rotation3;

use pseudolabel::eval::{average_precision, bev_iou, Box3D, Interpolation, IouMode};
use pseudolabel::geometry::{EgoTrajectory, RigidTransform, Vec3};
use pseudolabel::pipeline::io::{self, Calibration};
use pseudolabel::pipeline::{self, PipelineConfig, PoseFrame};
use pseudolabel::scenario::{DetectionNoise, Scenario, ScenarioConfig};
use pseudolabel::tracker::{associate, ObjectObservation, TrackerParams};

fn scenario(seed: u64, frames: usize) -> Scenario {
    let mut cfg = ScenarioConfig::urban(seed);
    cfg.frame_count = frames;
    Scenario::generate(cfg).unwrap()
}

fn config(dir: &Path, iterations: usize) -> PipelineConfig {
    PipelineConfig {
        iterations,
        input: dir.to_path_buf(),
        output: dir.join("out"),
        ..PipelineConfig::default()
    }
}

#[test]
fn tracklets_follow_true_identities_at_low_noise() {
    let s = scenario(2, 30);
    let noise = DetectionNoise {
        sigma_t: 0.2,
        sigma_yaw: 0.05,
        false_negative_rate: 0.1,
    };
    let detections = s.detections(&noise, 1);
    let frames: Vec<Vec<ObjectObservation>> = detections
        .iter()
        .enumerate()
        .map(|(f, dets)| {
            dets.iter()
                .map(|d| ObjectObservation {
                    frame_index: f,
                    pose: d.pose,
                    shape_code: d.record.shape_code.clone(),
                    confidence: d.record.boxed.score,
                    detected: true,
                })
                .collect()
        })
        .collect();
    let tracklets = associate(&frames, &s.ego, &TrackerParams::default());

    // map observations back to the object that caused them
    let mut owner: HashMap<(usize, u64, u64), usize> = HashMap::new();
    for (f, dets) in detections.iter().enumerate() {
        for d in dets {
            owner.insert(
                (f, d.pose.translation.x.to_bits(), d.pose.translation.z.to_bits()),
                d.object,
            );
        }
    }
    let mut impure = 0;
    for t in &tracklets {
        let ids: Vec<usize> = t
            .observations
            .iter()
            .map(|o| {
                owner[&(
                    o.frame_index,
                    o.pose.translation.x.to_bits(),
                    o.pose.translation.z.to_bits(),
                )]
            })
            .collect();
        if ids.iter().any(|i| *i != ids[0]) {
            impure += 1;
        }
    }
    let total: usize = frames.iter().map(Vec::len).sum();
    assert_eq!(tracklets.iter().map(|t| t.len()).sum::<usize>(), total);
    assert_eq!(impure, 0, "{impure} of {} tracklets mix objects", tracklets.len());
}

#[test]
fn refined_labels_beat_raw_detections() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(4, 30);
    s.write_sequence(dir.path(), 1).unwrap();
    let results = pipeline::run(&config(dir.path(), 1)).unwrap();

    let raw: Vec<Vec<Box3D>> = (0..s.frame_count())
        .map(|f| {
            io::read_detections(&io::frame_file(&dir.path().join("detections"), f, "txt"))
                .unwrap()
                .into_iter()
                .map(|r| r.boxed)
                .collect()
        })
        .collect();
    let gt = s.ground_truth();
    for mode in [IouMode::Bev, IouMode::ThreeD] {
        let before = average_precision(&raw, &gt, 0.5, mode, Interpolation::R40).unwrap();
        let after = results[0].metric(mode, Interpolation::R40).unwrap();
        assert!(after > before + 5.0, "{mode:?}: raw {before:.2}, refined {after:.2}");
    }
}

#[test]
fn propagated_boxes_fill_missed_frames() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(6, 30);
    s.write_sequence(dir.path(), 1).unwrap();
    let results = pipeline::run(&config(dir.path(), 1)).unwrap();
    let gt = s.ground_truth();
    let (mut propagated, mut hits) = (0, 0);
    for frame in &results[0].frames {
        for b in frame.boxes.iter().filter(|b| !b.detected) {
            propagated += 1;
            if gt[frame.frame_index].iter().any(|g| bev_iou(&b.boxed, g) >= 0.5) {
                hits += 1;
            }
        }
    }
    assert!(propagated >= 10, "{propagated}");
    assert!(hits as f64 >= 0.8 * propagated as f64, "{hits}/{propagated}");
}

#[test]
fn imu_poses_give_the_same_labels() {
    let s = scenario(8, 12);
    let cam = tempfile::tempdir().unwrap();
    s.write_sequence(cam.path(), 1).unwrap();
    let camera = pipeline::run(&config(cam.path(), 1)).unwrap();

    let imu = tempfile::tempdir().unwrap();
    s.write_sequence(imu.path(), 1).unwrap();
    let imu_to_velo = RigidTransform::new(
        *Rotation3::from_euler_angles(0.01, -0.02, 0.005).matrix(),
        Vec3::new(-0.81, 0.32, -0.80),
    )
    .unwrap();
    let calib = Calibration {
        imu_to_velo: Some(imu_to_velo),
        ..s.calibration()
    };
    let c = calib.imu_to_cam().unwrap();
    let imu_poses = EgoTrajectory::new(
        s.ego
            .poses()
            .iter()
            .map(|t| c.inverse().compose(t).compose(&c))
            .collect(),
    );
    io::write_text(&imu.path().join("calib.txt"), &calib.to_text()).unwrap();
    io::write_text(&imu.path().join("poses.txt"), &imu_poses.to_text()).unwrap();
    let cfg = PipelineConfig {
        pose_frame: PoseFrame::Imu,
        ..config(imu.path(), 1)
    };
    let from_imu = pipeline::run(&cfg).unwrap();

    for (a, b) in camera[0].frames.iter().zip(&from_imu[0].frames) {
        assert_eq!(a.boxes.len(), b.boxes.len());
        for (x, y) in a.boxes.iter().zip(&b.boxes) {
            assert!((x.boxed.center - y.boxed.center).norm() < 1e-4);
            assert!((x.boxed.yaw - y.boxed.yaw).abs() < 1e-4);
        }
    }
}

#[test]
fn later_iterations_use_their_own_detections() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(10, 15);
    s.write_sequence(dir.path(), 2).unwrap();
    let two = pipeline::run(&config(dir.path(), 2)).unwrap();
    assert_ne!(two[0].frames, two[1].frames);

    // without detections_2 the second iteration reruns the first set
    std::fs::remove_dir_all(dir.path().join("detections_2")).unwrap();
    let fallback = pipeline::run(&config(dir.path(), 2)).unwrap();
    assert_eq!(fallback[0].frames, fallback[1].frames);
}
