//! Oracle suites run by the `selftest` command: assignment against brute
//! force, gradients against finite differences, sampler contracts, scene
//! geometry, flip involution and loss permutation invariance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::config::TrainConfig;
use crate::criterion::{hungarian_loss, targets_from_pose, CriterionWeights, TargetEntity};
use crate::error::Result;
use crate::estimator::{KeypointEstimator, QueryPrediction, QueryPredictionSet};
use crate::gradcheck::{gradcheck, sample_coords, GradcheckReport, STEP};
use crate::graph::{Graph, Var};
use crate::hungarian::{brute_force_assignment, solve_assignment, CostMatrix};
use crate::nn::{gaussian, Bound, MultiHeadAttention, ParamStore};
use crate::par::{self, Execution};
use crate::recognizer::ActionRecognizer;
use crate::render::render_frame;
use crate::sampling::{clip_bounds, sample_n_clips_test, sample_n_clips_train, sample_uniform};
use crate::scene::{make_object_keypoints, object_invariant_error, FramePose};
use crate::synth::{generate_video, horizontal_flip, SceneConfig};
use crate::tensor::Tensor;

/// Tolerance for gradient checks.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: usize,
    pub failed: usize,
    pub detail: String,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

fn report(name: &'static str, outcomes: &[bool], detail: String) -> SuiteReport {
    let passed = outcomes.iter().filter(|b| **b).count();
    SuiteReport {
        name,
        passed,
        failed: outcomes.len() - passed,
        detail,
    }
}

/// Random cost matrix with dims in `1..=7`, integer or float entries.
pub fn random_cost_matrix<R: Rng + ?Sized>(rng: &mut R, integer: bool) -> CostMatrix {
    let rows = rng.random_range(1..=7);
    let cols = rng.random_range(1..=7);
    let costs = (0..rows * cols)
        .map(|_| {
            if integer {
                rng.random_range(-20i32..=20) as f64
            } else {
                rng.random_range(-10.0..10.0)
            }
        })
        .collect();
    CostMatrix::new(rows, cols, costs).expect("valid random matrix")
}

/// `n` integer and `n` float matrices against brute force.
pub fn hungarian_suite(n: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::with_capacity(2 * n);
    let mut worst = 0.0f64;
    for integer in [true, false] {
        for _ in 0..n {
            let m = random_cost_matrix(&mut rng, integer);
            let fast = solve_assignment(&m);
            let slow = brute_force_assignment(&m).expect("small matrix");
            let diff = (fast.total_cost - slow.total_cost).abs();
            worst = worst.max(diff);
            outcomes.push(if integer { diff == 0.0 } else { diff <= 1e-9 });
        }
    }
    report("hungarian-vs-brute-force", &outcomes, format!("max |Δcost| = {worst:.3e}"))
}

/// Scalar `Σ wᵢ xᵢ` with fixed non-uniform weights, so every output
/// element reaches the gradient with a distinct factor.
fn reduce(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    let w: Vec<f64> = (0..t.numel()).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let w = Tensor::new(t.shape().to_vec(), w)?;
    let w = g.constant(w);
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

type OpCase = (&'static str, Box<dyn Fn(&mut Graph, &Bound, &[crate::nn::ParamId]) -> Result<Var> + Sync + Send>);

/// Every differentiable graph op, reduced to a scalar with a fixed random
/// weighting, against finite differences.
pub fn op_gradient_suite(seed: u64, exec: Execution) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", gaussian(&mut rng, 3, 4, 1.0));
    let b = store.add("b", gaussian(&mut rng, 4, 5, 1.0));
    let c = store.add("c", gaussian(&mut rng, 3, 4, 1.0));
    let r = store.add("r", gaussian(&mut rng, 1, 4, 1.0));
    let k = store.add("k", gaussian(&mut rng, 5, 4, 1.0));
    let ids = vec![a, b, c, r, k];
    let mut att_store = store.clone();
    let mha = MultiHeadAttention::new(&mut att_store, &mut rng, "mha", 4, 2).expect("4 divisible by 2");
    let cases: Vec<OpCase> = vec![
        ("matmul", Box::new(|g, p, i| { let v = g.matmul(p.var(i[0]), p.var(i[1]))?; reduce(g, v) })),
        ("matmul_nt", Box::new(|g, p, i| { let v = g.matmul_nt(p.var(i[0]), p.var(i[4]))?; reduce(g, v) })),
        ("add", Box::new(|g, p, i| { let v = g.add(p.var(i[0]), p.var(i[2]))?; reduce(g, v) })),
        ("sub", Box::new(|g, p, i| { let v = g.sub(p.var(i[0]), p.var(i[2]))?; reduce(g, v) })),
        ("mul", Box::new(|g, p, i| { let v = g.mul(p.var(i[0]), p.var(i[2]))?; reduce(g, v) })),
        ("add_row", Box::new(|g, p, i| { let v = g.add_row(p.var(i[0]), p.var(i[3]))?; reduce(g, v) })),
        ("scale", Box::new(|g, p, i| { let v = g.scale(p.var(i[0]), -1.7); reduce(g, v) })),
        ("gelu", Box::new(|g, p, i| { let v = g.gelu(p.var(i[0])); reduce(g, v) })),
        ("sigmoid", Box::new(|g, p, i| { let v = g.sigmoid(p.var(i[0])); reduce(g, v) })),
        ("abs", Box::new(|g, p, i| { let v = g.abs(p.var(i[0])); reduce(g, v) })),
        ("softmax_rows", Box::new(|g, p, i| { let v = g.softmax_rows(p.var(i[0]))?; reduce(g, v) })),
        ("layer_norm", Box::new(|g, p, i| {
            let beta = g.scale(p.var(i[3]), 0.5);
            let v = g.layer_norm(p.var(i[0]), p.var(i[3]), beta, 1e-5)?;
            reduce(g, v)
        })),
        ("slice_cols", Box::new(|g, p, i| { let v = g.slice_cols(p.var(i[1]), 1, 3)?; reduce(g, v) })),
        ("concat_cols", Box::new(|g, p, i| { let v = g.concat_cols(&[p.var(i[0]), p.var(i[2])])?; reduce(g, v) })),
        ("concat_rows", Box::new(|g, p, i| { let v = g.concat_rows(&[p.var(i[0]), p.var(i[4])])?; reduce(g, v) })),
        ("select_rows", Box::new(|g, p, i| { let v = g.select_rows(p.var(i[4]), &[3, 0, 3])?; reduce(g, v) })),
        ("mean", Box::new(|g, p, i| { let v = g.mul(p.var(i[0]), p.var(i[0]))?; Ok(g.mean(v)) })),
        ("cross_entropy", Box::new(|g, p, i| g.cross_entropy(p.var(i[0]), &[1, 3, 0], &[1.0, 0.1, 0.5], 3.0))),
    ];
    let mut outcomes = Vec::new();
    let mut worst = (0.0f64, "");
    for (name, f) in &cases {
        let coords = sample_coords(&store, 64, &mut rng);
        let ids = ids.clone();
        let r = gradcheck(&store, |g, p| f(g, p, &ids), &coords, STEP, exec);
        let e = r.map_or(f64::INFINITY, |r| r.max_rel_error);
        if e > worst.0 {
            worst = (e, name);
        }
        outcomes.push(e < GRAD_TOL);
    }
    let coords = sample_coords(&att_store, 64, &mut rng);
    let x = gaussian(&mut rng, 3, 4, 1.0);
    let m = gaussian(&mut rng, 5, 4, 1.0);
    let r = gradcheck(
        &att_store,
        |g, p| {
            let xq = g.constant(x.clone());
            let mem = g.constant(m.clone());
            let v = mha.forward(g, p, xq, mem, mem)?;
            let s = g.mul(v, v)?;
            Ok(g.sum(s))
        },
        &coords,
        STEP,
        exec,
    );
    let e = r.map_or(f64::INFINITY, |r| r.max_rel_error);
    if e > worst.0 {
        worst = (e, "attention");
    }
    outcomes.push(e < GRAD_TOL);
    report("op-gradients", &outcomes, format!("max rel err {:.3e} ({})", worst.0, worst.1))
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    let normal = Normal::new(0.0, std).expect("positive std");
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += normal.sample(rng);
        }
    }
}

/// Full estimator loss gradient at a perturbed random parameter point.
pub fn estimator_gradcheck(config: &TrainConfig, point: u64, per_tensor: usize, exec: Execution) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(point);
    let mut model = KeypointEstimator::new(config.estimator(), point)?;
    perturb(&mut model.params, &mut rng, 0.02);
    let video = generate_video(rng.random_range(0..config.n_actions), point, &config.scene())?;
    let pose = video.frames[rng.random_range(0..video.len())].clone();
    let coords = sample_coords(&model.params, per_tensor, &mut rng);
    let model_ref = &model;
    gradcheck(
        &model.params,
        |g, p| Ok(crate::train::estimator_loss(model_ref, g, p, &pose, config, config.aux_loss)?.0),
        &coords,
        STEP,
        exec,
    )
}

/// Full recognizer cross-entropy gradient at a perturbed random point.
pub fn recognizer_gradcheck(config: &TrainConfig, point: u64, per_tensor: usize, exec: Execution) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(point);
    let mut model = ActionRecognizer::new(config.recognizer(), point)?;
    perturb(&mut model.params, &mut rng, 0.02);
    let action = rng.random_range(0..config.n_actions);
    let video = generate_video(action, point, &config.scene())?;
    let idx = sample_uniform(video.len(), config.recognizer().n_frames)?;
    let poses: Vec<FramePose> = idx.iter().map(|&i| video.frames[i].clone()).collect();
    let coords = sample_coords(&model.params, per_tensor, &mut rng);
    let model_ref = &model;
    gradcheck(
        &model.params,
        |g, p| {
            let logits = model_ref.forward_graph(g, p, &poses)?;
            g.cross_entropy(logits, &[action], &[1.0], 1.0)
        },
        &coords,
        STEP,
        exec,
    )
}

pub fn model_gradient_suite(config: &TrainConfig, points: u64, per_tensor: usize, exec: Execution) -> SuiteReport {
    let mut outcomes = Vec::new();
    let mut worst = 0.0f64;
    for point in 0..points {
        for r in [
            estimator_gradcheck(config, point, per_tensor, exec),
            recognizer_gradcheck(config, point, per_tensor, exec),
        ] {
            let e = r.map_or(f64::INFINITY, |r| r.max_rel_error);
            worst = worst.max(e);
            outcomes.push(e < GRAD_TOL);
        }
    }
    report("model-gradients", &outcomes, format!("max rel err {worst:.3e}"))
}

/// Count, order and range of all samplers, and clip membership of the
/// training draw.
pub fn sampler_suite(n: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(1..=400);
        let count = rng.random_range(1..=len);
        let train = sample_n_clips_train(len, count, &mut rng).expect("count <= len");
        let test = sample_n_clips_test(len, count).expect("count <= len");
        let uni = sample_uniform(len, count).expect("count <= len");
        let ok = [&train, &test, &uni].iter().all(|idx| {
            idx.len() == count && idx.windows(2).all(|w| w[0] < w[1]) && idx.iter().all(|&i| i < len)
        }) && train.iter().enumerate().all(|(i, &v)| {
            let (lo, hi) = clip_bounds(len, count, i);
            lo <= v && v < hi
        });
        outcomes.push(ok);
    }
    let fixed = sample_n_clips_test(128, 64).expect("valid") == (0..64).map(|i| 2 * i + 1).collect::<Vec<_>>();
    outcomes.push(fixed);
    report("sampler-contracts", &outcomes, format!("{n} random (T, N) pairs"))
}

/// Pooled χ² statistic of per-clip draws and its α = 0.01 critical value.
pub fn clip_uniformity_chi_square(len: usize, n: usize, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; len];
    for _ in 0..draws {
        for i in sample_n_clips_train(len, n, &mut rng).expect("n <= len") {
            counts[i] += 1;
        }
    }
    let mut stat = 0.0;
    let mut df = 0usize;
    for i in 0..n {
        let (lo, hi) = clip_bounds(len, n, i);
        let expected = draws as f64 / (hi - lo) as f64;
        stat += counts[lo..hi].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum::<f64>();
        df += hi - lo - 1;
    }
    let crit = ChiSquared::new(df as f64).expect("df > 0").inverse_cdf(0.99);
    (stat, crit)
}

pub fn chi_square_suite(seed: u64) -> SuiteReport {
    let (stat, crit) = clip_uniformity_chi_square(100, 10, 100_000, seed);
    report("clip-uniformity", &[stat < crit], format!("χ² = {stat:.2}, critical {crit:.2}"))
}

/// Random boxes satisfy the centroid and midpoint invariants.
pub fn geometry_suite(n: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::with_capacity(n);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let half = [
            rng.random_range(0.01..0.1),
            rng.random_range(0.01..0.1),
            rng.random_range(0.01..0.1),
        ];
        let center = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
        let ypr = [
            rng.random_range(-3.2..3.2),
            rng.random_range(-3.2..3.2),
            rng.random_range(-3.2..3.2),
        ];
        let obj = make_object_keypoints(center, half, ypr, rng.random_range(0..4)).expect("fits in cube");
        let e = object_invariant_error(&obj);
        worst = worst.max(e);
        outcomes.push(e <= 1e-9);
    }
    report("object-geometry", &outcomes, format!("max invariant error {worst:.3e}"))
}

/// Double flip restores keypoints exactly; re-rendered flips match
/// mirrored grids.
pub fn flip_suite(n: usize, seed: u64, exec: Execution) -> SuiteReport {
    let cfg = SceneConfig::default();
    let outcomes = par::map_range(exec, n, |i| {
        let action = i % cfg.n_actions;
        let Ok(v) = generate_video(action, seed.wrapping_add(i as u64), &cfg) else {
            return false;
        };
        let twice = horizontal_flip(&horizontal_flip(&v));
        let f = (i * 7) % v.len();
        let direct = render_frame(&v.frames[f].mirrored(), &cfg.render);
        let mirrored = render_frame(&v.frames[f], &cfg.render).mirrored_swapped();
        let regrid = render_frame(&twice.frames[f], &cfg.render);
        twice.frames == v.frames
            && direct.max_abs_diff(&mirrored) < 1e-9
            && regrid.max_abs_diff(&render_frame(&v.frames[f], &cfg.render)) < 1e-9
    });
    report("flip-involution", &outcomes, format!("{n} videos"))
}

fn random_preds<R: Rng + ?Sized>(rng: &mut R, q: usize, classes: usize) -> QueryPredictionSet {
    QueryPredictionSet {
        predictions: (0..q)
            .map(|_| QueryPrediction {
                class_logits: (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect(),
                keypoints: (0..63).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect(),
    }
}

/// Shuffling query order leaves the Hungarian loss unchanged.
pub fn loss_permutation_suite(n: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = CriterionWeights::default();
    let scene = SceneConfig::default();
    let mut outcomes = Vec::with_capacity(n);
    let mut worst = 0.0f64;
    for i in 0..n {
        let q = rng.random_range(3..=12);
        let preds = random_preds(&mut rng, q, 7);
        let targets: Vec<TargetEntity> = match generate_video(i % 8, i as u64, &scene) {
            Ok(v) => targets_from_pose(&v.frames[0]),
            Err(_) => {
                outcomes.push(false);
                continue;
            }
        };
        let mut order: Vec<usize> = (0..q).collect();
        order.shuffle(&mut rng);
        let a = hungarian_loss(&preds, &targets, &w).map(|l| l.total);
        let b = hungarian_loss(&preds.permuted(&order), &targets, &w).map(|l| l.total);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                worst = worst.max((a - b).abs());
                outcomes.push((a - b).abs() < 1e-9);
            }
            _ => outcomes.push(false),
        }
    }
    report("loss-permutation", &outcomes, format!("max |Δloss| = {worst:.3e}"))
}

/// Every suite at its default size.
pub fn run_all(exec: Execution) -> Vec<SuiteReport> {
    let cfg = TrainConfig::default();
    vec![
        hungarian_suite(500, 1),
        op_gradient_suite(2, exec),
        model_gradient_suite(&cfg, 2, 2, exec),
        sampler_suite(10_000, 3),
        chi_square_suite(4),
        geometry_suite(10_000, 5),
        flip_suite(20, 6, exec),
        loss_permutation_suite(100, 7),
    ]
}
