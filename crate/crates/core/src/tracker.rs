//! Greedy nearest-neighbour association of per-frame detections into
//! tracklets, run in the global frame so ego-motion does not break gating.

use crate::geometry::{to_global_translation, EgoTrajectory, Pose4DoF, Vec3};
use crate::shapespace::ShapeCode;

/// One per-frame pose hypothesis of an object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectObservation {
    pub frame_index: usize,
    pub pose: Pose4DoF,
    pub shape_code: ShapeCode,
    pub confidence: f64,
    /// False for poses propagated into frames without a detection.
    pub detected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionState {
    Static,
    Moving,
    Undecided,
}

impl MotionState {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::Moving => "moving",
            Self::Undecided => "undecided",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub track_id: usize,
    pub observations: Vec<ObjectObservation>,
    pub motion_state: MotionState,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.observations.first().map(|o| o.frame_index)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.observations.last().map(|o| o.frame_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerParams {
    /// Matches farther than this (meters, global frame) are forbidden.
    pub gate_radius: f64,
    /// Consecutive frames a track may go unmatched before it ends.
    pub max_age: usize,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            gate_radius: 2.0,
            max_age: 3,
        }
    }
}

/// Observations used for the coasting velocity estimate.
const VELOCITY_WINDOW: usize = 5;

struct ActiveTrack {
    id: usize,
    observations: Vec<ObjectObservation>,
    positions: Vec<Vec3>,
}

impl ActiveTrack {
    fn last_frame(&self) -> usize {
        self.observations.last().map_or(0, |o| o.frame_index)
    }

    /// Constant-velocity prediction of the global position at `frame`.
    fn predict(&self, frame: usize) -> Vec3 {
        let n = self.positions.len();
        let last = self.positions[n - 1];
        if n < 2 {
            return last;
        }
        let back = n.saturating_sub(VELOCITY_WINDOW);
        let span = (self.observations[n - 1].frame_index - self.observations[back].frame_index) as f64;
        if span <= 0.0 {
            return last;
        }
        let velocity = (last - self.positions[back]) / span;
        last + velocity * (frame - self.last_frame()) as f64
    }
}

/// Associates `frames[f]` (the detections of frame `f`) into tracklets.
///
/// Matching is greedy on Euclidean distance between each track's predicted
/// global position and each detection's global position. Ties resolve to the
/// lower track id, then the lower detection index. Tracklets come back ordered
/// by id with `Undecided` motion state.
pub fn associate(frames: &[Vec<ObjectObservation>], ego: &EgoTrajectory, params: &TrackerParams) -> Vec<Tracklet> {
    assert!(params.gate_radius > 0.0, "gate radius must be positive");
    let mut active: Vec<ActiveTrack> = Vec::new();
    let mut finished: Vec<ActiveTrack> = Vec::new();
    let mut next_id = 0;

    for (frame, detections) in frames.iter().enumerate() {
        let Some(pose) = ego.pose(frame) else {
            break;
        };
        // retire tracks that have been missing for longer than max_age
        let (keep, done): (Vec<_>, Vec<_>) = active
            .into_iter()
            .partition(|t| frame - t.last_frame() - 1 <= params.max_age);
        active = keep;
        finished.extend(done);

        let globals: Vec<Vec3> = detections
            .iter()
            .map(|d| to_global_translation(&d.pose.translation, pose))
            .collect();
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, track) in active.iter().enumerate() {
            let predicted = track.predict(frame);
            for (di, g) in globals.iter().enumerate() {
                let dist = (g - predicted).norm();
                if dist <= params.gate_radius {
                    candidates.push((dist, ti, di));
                }
            }
        }
        candidates.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(active[a.1].id.cmp(&active[b.1].id))
                .then(a.2.cmp(&b.2))
        });
        let mut track_used = vec![false; active.len()];
        let mut det_used = vec![false; detections.len()];
        for (_, ti, di) in candidates {
            if track_used[ti] || det_used[di] {
                continue;
            }
            track_used[ti] = true;
            det_used[di] = true;
            let mut obs = detections[di].clone();
            obs.frame_index = frame;
            active[ti].observations.push(obs);
            active[ti].positions.push(globals[di]);
        }
        for (di, det) in detections.iter().enumerate() {
            if det_used[di] {
                continue;
            }
            let mut obs = det.clone();
            obs.frame_index = frame;
            active.push(ActiveTrack {
                id: next_id,
                observations: vec![obs],
                positions: vec![globals[di]],
            });
            next_id += 1;
        }
    }
    finished.extend(active);
    finished.sort_by_key(|t| t.id);
    finished
        .into_iter()
        .map(|t| Tracklet {
            track_id: t.id,
            observations: t.observations,
            motion_state: MotionState::Undecided,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn obs(frame: usize, x: f64, z: f64) -> ObjectObservation {
        ObjectObservation {
            frame_index: frame,
            pose: Pose4DoF::new(Vec3::new(x, 1.0, z), 0.0),
            shape_code: ShapeCode::zeros(2),
            confidence: 0.9,
            detected: true,
        }
    }

    #[test]
    fn single_object_single_track() {
        let frames: Vec<_> = (0..10).map(|f| vec![obs(f, 2.0, 10.0 + f as f64)]).collect();
        let tracks = associate(&frames, &EgoTrajectory::stationary(10), &TrackerParams::default());
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].len(), 10);
        assert_eq!(tracks[0].motion_state, MotionState::Undecided);
    }

    #[test]
    fn two_noisy_objects_stay_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.2).unwrap();
        // ground-truth identity encoded in the confidence field
        let frames: Vec<Vec<ObjectObservation>> = (0..30)
            .map(|f| {
                let mut dets = Vec::new();
                for (id, x) in [(0, -10.0), (1, 10.0)] {
                    let mut o = obs(
                        f,
                        x + noise.sample(&mut rng),
                        15.0 + 0.5 * f as f64 + noise.sample(&mut rng),
                    );
                    o.confidence = id as f64;
                    dets.push(o);
                }
                if f % 2 == 1 {
                    dets.reverse();
                }
                dets
            })
            .collect();
        let tracks = associate(&frames, &EgoTrajectory::stationary(30), &TrackerParams::default());
        assert_eq!(tracks.len(), 2);
        for t in &tracks {
            let id = t.observations[0].confidence;
            assert_eq!(t.len(), 30);
            assert!(t.observations.iter().all(|o| o.confidence == id), "identity switch");
        }
    }

    #[test]
    fn long_gap_splits_track() {
        let params = TrackerParams::default();
        let make = |gap: usize| -> Vec<Vec<ObjectObservation>> {
            (0..5 + gap + 5)
                .map(|f| {
                    if (5..5 + gap).contains(&f) {
                        vec![]
                    } else {
                        vec![obs(f, 0.0, 20.0)]
                    }
                })
                .collect()
        };
        let ego = EgoTrajectory::stationary(40);
        assert_eq!(associate(&make(params.max_age), &ego, &params).len(), 1);
        assert_eq!(associate(&make(params.max_age + 1), &ego, &params).len(), 2);
    }

    #[test]
    fn ego_motion_is_compensated() {
        // a parked car seen from a camera driving forward 1 m per frame
        let ego = EgoTrajectory::new(
            (0..10)
                .map(|f| RigidTransform::from_translation(Vec3::new(0.0, 0.0, f as f64)))
                .collect(),
        );
        let frames: Vec<_> = (0..10).map(|f| vec![obs(f, 3.0, 30.0 - f as f64)]).collect();
        let params = TrackerParams {
            gate_radius: 0.5,
            max_age: 3,
        };
        assert_eq!(associate(&frames, &ego, &params).len(), 1);
    }

    proptest! {
        #[test]
        fn partition_and_rigid_invariance(seed in 0u64..200, yaw in -3.0f64..3.0, tx in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.6).unwrap();
            let frames: Vec<Vec<ObjectObservation>> = (0..15)
                .map(|f| {
                    (0..4)
                        .filter(|k| (f + k) % 5 != 0)
                        .map(|k| obs(f, 4.0 * k as f64 + noise.sample(&mut rng), 10.0 + noise.sample(&mut rng)))
                        .collect()
                })
                .collect();
            let ego = EgoTrajectory::stationary(15);
            let params = TrackerParams::default();
            let tracks = associate(&frames, &ego, &params);
            let total: usize = frames.iter().map(Vec::len).sum();
            prop_assert_eq!(tracks.iter().map(Tracklet::len).sum::<usize>(), total);
            for t in &tracks {
                prop_assert!(t.observations.windows(2).all(|w| w[0].frame_index < w[1].frame_index));
            }
            let g = RigidTransform::from_yaw(yaw, Vec3::new(tx, 0.0, -tx));
            let moved = associate(&frames, &ego.moved_by(&g), &params);
            prop_assert_eq!(moved, tracks);
        }
    }
}
