use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pseudolabel::chamfer::{transform_to_scene, visible_shape_points, IndexedScan, VisibilityParams};
use pseudolabel::exec;
use pseudolabel::geometry::{Pose4DoF, Vec3};
use pseudolabel::refine::{refine_pose, RefinementConfig, TargetRef};
use pseudolabel::shapespace::procedural::{CarParams, CarTemplate};

struct Job {
    start: Pose4DoF,
    scan: IndexedScan,
}

fn jobs(count: usize) -> (Vec<Vec3>, Vec<Job>) {
    let shape = CarTemplate::new(1024).points(&CarParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let jobs = (0..count)
        .map(|_| {
            let truth = Pose4DoF::new(
                Vec3::new(rng.random_range(-6.0..6.0), 0.9, rng.random_range(8.0..25.0)),
                rng.random_range(-3.0..3.0),
            );
            let visible = visible_shape_points(&shape, &truth, &VisibilityParams::default());
            let scan = IndexedScan::new(&transform_to_scene(&visible, &truth));
            let start = Pose4DoF::new(
                truth.translation + Vec3::new(rng.random_range(-0.3..0.3), 0.0, rng.random_range(-0.3..0.3)),
                truth.yaw() + rng.random_range(-0.1..0.1),
            );
            Job { start, scan }
        })
        .collect();
    (shape, jobs)
}

fn refinement(c: &mut Criterion) {
    let cfg = RefinementConfig::default();
    let mut group = c.benchmark_group("refine_observations");
    group.sample_size(10);
    for count in [16, 64] {
        let (shape, jobs) = jobs(count);
        let refine = |j: &Job| refine_pose(&j.start, &shape, Some(&j.scan), TargetRef::none(), &cfg).unwrap();
        group.bench_with_input(BenchmarkId::new("sequential", count), &jobs, |b, jobs| {
            b.iter(|| exec::map_sequential(jobs, refine))
        });
        group.bench_with_input(BenchmarkId::new("parallel", count), &jobs, |b, jobs| {
            b.iter(|| exec::map(jobs, refine))
        });
    }
    group.finish();
}

criterion_group!(benches, refinement);
criterion_main!(benches);
