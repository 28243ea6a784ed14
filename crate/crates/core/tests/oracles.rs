use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use egoaction::config::TrainConfig;
use egoaction::dataset::generate_dataset;
use egoaction::estimator::{EstimatorConfig, KeypointEstimator};
use egoaction::graph::Graph;
use egoaction::metrics::frame_mpjpe;
use egoaction::nn::{gaussian, MultiHeadAttention, ParamStore};
use egoaction::par::Execution;
use egoaction::recognizer::{token_input, ActionRecognizer, RecognizerConfig};
use egoaction::render::render_frame;
use egoaction::sampling::sample_uniform;
use egoaction::scene::FramePose;
use egoaction::synth::{generate_video, SceneConfig};
use egoaction::tensor::Tensor;

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..w.cols())
                .map(|j| b.get(0, j) + (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Loop-level multi-head attention.
fn naive_attention(store: &ParamStore, mha: &MultiHeadAttention, xq: &Tensor, xkv: &Tensor) -> Vec<Vec<f64>> {
    let lin = |l: &egoaction::nn::Linear, x: &Tensor| affine(x, store.get(l.weight), store.get(l.bias));
    let (q, k, v) = (lin(&mha.query, xq), lin(&mha.key, xkv), lin(&mha.value, xkv));
    let dh = mha.dim / mha.n_heads;
    let mut merged = vec![vec![0.0; mha.dim]; q.len()];
    for h in 0..mha.n_heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            for c in cols.clone() {
                merged[i][c] = exp.iter().zip(&v).map(|(e, vj)| e / z * vj[c]).sum();
            }
        }
    }
    let merged = Tensor::from_rows(&merged).unwrap();
    affine(&merged, store.get(mha.output.weight), store.get(mha.output.bias))
}

#[test]
fn attention_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (dim, heads, nq, nk) in [(8, 2, 3, 5), (12, 3, 4, 4), (16, 1, 1, 7)] {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", dim, heads).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = gaussian(&mut rng, shape[0], shape[1], 0.5);
        }
        let xq = gaussian(&mut rng, nq, dim, 1.0);
        let xkv = gaussian(&mut rng, nk, dim, 1.0);
        let expected = naive_attention(&store, &mha, &xq, &xkv);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (q, kv) = (g.constant(xq.clone()), g.constant(xkv.clone()));
        let out = mha.forward(&mut g, &p, q, kv, kv).unwrap();
        let got = g.value(out);
        for (i, row) in expected.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                assert!((got.get(i, j) - e).abs() < 1e-12, "({i},{j}): {} vs {e}", got.get(i, j));
            }
        }
    }
}

fn tiny_estimator() -> EstimatorConfig {
    EstimatorConfig {
        dim: 16,
        ffn_dim: 32,
        encoder_layers: 1,
        decoder_layers: 2,
        ..EstimatorConfig::default()
    }
}

#[test]
fn permuting_queries_permutes_predictions() {
    let scene = SceneConfig::default();
    let video = generate_video(3, 5, &scene).unwrap();
    let grid = render_frame(&video.frames[10], &scene.render);
    let model = KeypointEstimator::new(tiny_estimator(), 9).unwrap();
    let base = model.predict(&grid).unwrap();
    let order = [5, 0, 11, 2, 9, 1, 3, 10, 4, 8, 6, 7];
    let mut permuted = model.clone();
    let q = permuted.query_param();
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| model.params.get(q).row(i).to_vec()).collect();
    *permuted.params.get_mut(q) = Tensor::from_rows(&rows).unwrap();
    let got = permuted.predict(&grid).unwrap();
    for (slot, &src) in order.iter().enumerate() {
        let (a, b) = (&got.predictions[slot], &base.predictions[src]);
        for (x, y) in a.class_logits.iter().zip(&b.class_logits).chain(a.keypoints.iter().zip(&b.keypoints)) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

fn small_recognizer() -> RecognizerConfig {
    RecognizerConfig {
        n_frames: 16,
        dim: 16,
        ffn_dim: 32,
        layers: 2,
        ..RecognizerConfig::default()
    }
}

#[test]
fn without_positions_frame_order_is_irrelevant() {
    let scene = SceneConfig::default();
    let video = generate_video(1, 2, &scene).unwrap();
    let idx = sample_uniform(video.len(), 16).unwrap();
    let poses: Vec<FramePose> = idx.iter().map(|&i| video.frames[i].clone()).collect();
    let mut model = ActionRecognizer::new(small_recognizer(), 4).unwrap();
    let with_pos = model.logits(&poses).unwrap();
    let mut reversed = poses.clone();
    reversed.reverse();
    assert!(with_pos.iter().zip(model.logits(&reversed).unwrap()).any(|(a, b)| (a - b).abs() > 1e-9));

    let pe = model.pos_embed_param();
    let shape = model.params.get(pe).shape().to_vec();
    *model.params.get_mut(pe) = Tensor::zeros(&shape);
    let a = model.logits(&poses).unwrap();
    let b = model.logits(&reversed).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-10);
    }
}

/// Sixteen evenly spaced frame tokens per video, concatenated.
fn video_features(frames: &[FramePose], k: usize) -> Vec<f64> {
    sample_uniform(frames.len(), 16)
        .unwrap()
        .iter()
        .flat_map(|&i| token_input(&frames[i], k).unwrap())
        .collect()
}

#[test]
fn actions_are_separable_by_nearest_centroid() {
    let cfg = TrainConfig {
        train_per_class: 25,
        val_per_class: 0,
        test_per_class: 10,
        ..TrainConfig::default()
    };
    let ds = generate_dataset(&cfg, Execution::Parallel).unwrap();
    let dim = video_features(&ds.train[0].frames, cfg.n_object_classes).len();
    let mut centroids = vec![vec![0.0; dim]; cfg.n_actions];
    for v in &ds.train {
        for (c, f) in centroids[v.action_id].iter_mut().zip(video_features(&v.frames, cfg.n_object_classes)) {
            *c += f / cfg.train_per_class as f64;
        }
    }
    let correct = ds
        .test
        .iter()
        .filter(|v| {
            let f = video_features(&v.frames, cfg.n_object_classes);
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..cfg.n_actions).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == v.action_id
        })
        .count();
    let acc = correct as f64 / ds.test.len() as f64;
    assert!(acc > 0.8, "nearest-centroid accuracy {acc}");
}

#[test]
fn mpjpe_matches_direct_formula() {
    let scene = SceneConfig::default();
    let a = generate_video(0, 1, &scene).unwrap().frames[0].clone();
    let b = generate_video(5, 8, &scene).unwrap().frames[7].clone();
    let (fa, fb) = (a.to_flat(), b.to_flat());
    let direct = fa.chunks(3).zip(fb.chunks(3)).map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()).sum::<f64>() / 63.0;
    assert!((frame_mpjpe(&a, &b) - direct).abs() < 1e-15);

    let mut shifted = a.to_flat();
    shifted.iter_mut().step_by(3).for_each(|x| *x += 0.1);
    let shifted = FramePose::from_flat(&shifted, a.object.class_id).unwrap();
    assert!((frame_mpjpe(&shifted, &a) - 0.1).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recognizer_logits_are_finite_for_any_video(action in 0usize..8, seed in any::<u64>()) {
        let scene = SceneConfig::default();
        let video = generate_video(action, seed, &scene).unwrap();
        let idx = sample_uniform(video.len(), 16).unwrap();
        let poses: Vec<FramePose> = idx.iter().map(|&i| video.frames[i].clone()).collect();
        let model = ActionRecognizer::new(small_recognizer(), seed).unwrap();
        let logits = model.logits(&poses).unwrap();
        prop_assert_eq!(logits.len(), 8);
        prop_assert!(logits.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn generated_poses_stay_in_unit_cube(action in 0usize..8, seed in any::<u64>()) {
        let video = generate_video(action, seed, &SceneConfig::default()).unwrap();
        prop_assert!((96..=160).contains(&video.len()));
        prop_assert!(video.frames.iter().all(FramePose::in_bounds));
        prop_assert!(video.frames.iter().all(|f| f.object.class_id < 4));
    }
}
