use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use egoaction::config::TrainConfig;
use egoaction::dataset::generate_dataset;
use egoaction::gradcheck::{gradcheck, sample_coords, STEP};
use egoaction::hungarian::solve_assignment;
use egoaction::par::{self, Execution};
use egoaction::recognizer::ActionRecognizer;
use egoaction::selftest::random_cost_matrix;
use egoaction::train::{evaluate_recognizer, resolve_poses, PoseSource};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn small_config() -> TrainConfig {
    TrainConfig {
        train_per_class: 2,
        val_per_class: 1,
        test_per_class: 2,
        recognizer_dim: 32,
        recognizer_ffn_dim: 64,
        ..TrainConfig::default()
    }
}

fn dataset_generation(c: &mut Criterion) {
    let cfg = small_config();
    let mut group = c.benchmark_group("generate_dataset");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(&cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn recognizer_evaluation(c: &mut Criterion) {
    let cfg = small_config();
    let ds = generate_dataset(&cfg, Execution::Parallel).unwrap();
    let poses = resolve_poses(&ds.test, PoseSource::GroundTruth, &cfg, Execution::Parallel).unwrap();
    let model = ActionRecognizer::new(cfg.recognizer(), 1).unwrap();
    let mut group = c.benchmark_group("evaluate_recognizer");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_recognizer(&model, &ds.test, &poses, &cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn recognizer_gradcheck(c: &mut Criterion) {
    let cfg = small_config();
    let model = ActionRecognizer::new(cfg.recognizer(), 2).unwrap();
    let ds = generate_dataset(&cfg, Execution::Parallel).unwrap();
    let video = &ds.train[0];
    let idx = egoaction::sampling::sample_uniform(video.len(), cfg.frames).unwrap();
    let poses: Vec<_> = idx.iter().map(|&i| video.frames[i].clone()).collect();
    let coords = sample_coords(&model.params, 1, &mut ChaCha8Rng::seed_from_u64(3));
    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                gradcheck(
                    &model.params,
                    |g, p| {
                        let logits = model.forward_graph(g, p, &poses)?;
                        g.cross_entropy(logits, &[video.action_id], &[1.0], 1.0)
                    },
                    &coords,
                    STEP,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn hungarian_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let matrices: Vec<_> = (0..2000).map(|i| random_cost_matrix(&mut rng, i % 2 == 0)).collect();
    let mut group = c.benchmark_group("hungarian_batch");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::map(exec, &matrices, solve_assignment))
        });
    }
    group.finish();
}

criterion_group!(benches, dataset_generation, recognizer_evaluation, recognizer_gradcheck, hungarian_batch);
criterion_main!(benches);
