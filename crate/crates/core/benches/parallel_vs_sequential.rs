use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use navscale::curation::{TrainingSample, CHUNK_LEN, RANGE_RAYS};
use navscale::evalharness::{generate_route, run_route, RouteParams, RouteSpec, ScriptedExpert, SimConfig};
use navscale::exec::{map_parallel, map_sequential};
use navscale::policy::{Batch, MlpPolicy, PolicyArch};
use navscale::simworld::{generate_location, World};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(rng: &mut ChaCha8Rng) -> TrainingSample {
    TrainingSample {
        obs_history: vec![(0..RANGE_RAYS).map(|_| rng.random_range(0.0..1.0)).collect()],
        goal_history: vec![[rng.random_range(0.0..0.2), rng.random_range(-1.0..1.0)]],
        target_chunk: [[0.5, 0.1]; CHUNK_LEN],
        mirror_flag: false,
    }
}

fn gradients(c: &mut Criterion) {
    let arch = PolicyArch {
        history: 1,
        hidden: vec![128, 128, 64],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = MlpPolicy::init(&arch, &mut rng);
    let samples: Vec<TrainingSample> = (0..1024).map(|_| sample(&mut rng)).collect();
    let shards: Vec<Batch> = samples
        .chunks(64)
        .map(|c| Batch::from_samples(&c.iter().collect::<Vec<_>>(), 1).unwrap())
        .collect();
    let f = |b: &Batch| policy.backward(b, 1.0, 10.0).unwrap().0;
    let mut g = c.benchmark_group("batch_gradient");
    g.bench_function(BenchmarkId::new("sequential", shards.len()), |b| b.iter(|| map_sequential(&shards, f)));
    g.bench_function(BenchmarkId::new("parallel", shards.len()), |b| b.iter(|| map_parallel(&shards, f)));
    g.finish();
}

fn rollouts(c: &mut Criterion) {
    let jobs: Vec<(World, RouteSpec)> = (0..4)
        .map(|k| {
            let w = World::new(generate_location(k).unwrap());
            let r = generate_route(&w, "r", &RouteParams::default(), &mut ChaCha8Rng::seed_from_u64(k)).unwrap();
            (w, r)
        })
        .collect();
    let expert = ScriptedExpert::default();
    let sim = SimConfig::default();
    let f = |(w, r): &(World, RouteSpec)| run_route(&expert, w, r, 0, &sim, 1).unwrap().segments.len();
    let mut g = c.benchmark_group("route_rollouts");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("sequential", jobs.len()), |b| b.iter(|| map_sequential(&jobs, f)));
    g.bench_function(BenchmarkId::new("parallel", jobs.len()), |b| b.iter(|| map_parallel(&jobs, f)));
    g.finish();
}

criterion_group!(benches, gradients, rollouts);
criterion_main!(benches);
