//! Training loops for both stages, evaluation, and run directories.
//!
//! Training is single-threaded and consumes one seeded RNG stream per
//! stage, so a `(dataset, config)` pair fixes every parameter bit.
//! Evaluation fans out over videos and merges results in input order.
//!
//! A run directory holds `config.json`, `log.jsonl` (one record per epoch),
//! `timing.jsonl` (wall-clock seconds per epoch) and `best.ckpt`.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, config_hash};
use crate::config::TrainConfig;
use crate::criterion::{hungarian_loss_graph, targets_from_pose, LossBreakdown};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{select_entities, KeypointEstimator};
use crate::graph::{Gradients, Graph, Var};
use crate::jsonfmt;
use crate::metrics::{evaluate_top1, frame_mpjpe, mean_pose};
use crate::nn::{Bound, ParamStore};
use crate::optim::{clip_grad_norm, AdamW};
use crate::par::{self, Execution};
use crate::recognizer::{argmax, ActionRecognizer};
use crate::render::render_frame;
use crate::sampling::{sample_n_clips_train, sample_uniform, Phase, Strategy};
use crate::scene::FramePose;
use crate::synth::{derive_seed, VideoSample};
use crate::tensor::log_sum_exp;

const STREAM_ESTIMATOR_INIT: u64 = 1;
const STREAM_ESTIMATOR_TRAIN: u64 = 2;
const STREAM_RECOGNIZER_INIT: u64 = 3;
const STREAM_RECOGNIZER_TRAIN: u64 = 4;
const STREAM_EVAL: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Estimator,
    Recognizer,
}

/// One completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub seed: u64,
    pub steps: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_class_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_keypoint_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_mpjpe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// Append-only epoch log, optionally mirrored to a run directory.
#[derive(Debug, Default)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    dir: Option<PathBuf>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        RunLog::default()
    }

    /// Starts a run directory: creates it and writes `config.json`.
    pub fn create(dir: &Path, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, jsonfmt::to_pretty(config)?).map_err(|e| Error::io(&path, e))?;
        for name in ["log.jsonl", "timing.jsonl"] {
            let p = dir.join(name);
            File::create(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(RunLog {
            records: Vec::new(),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn append(&mut self, record: EpochRecord, wall_seconds: f64) -> Result<()> {
        if let Some(dir) = &self.dir {
            append_line(&dir.join("log.jsonl"), &jsonfmt::to_line(&record)?)?;
            let timing = serde_json::json!({"epoch": record.epoch, "stage": record.stage, "wall_seconds": wall_seconds});
            append_line(&dir.join("timing.jsonl"), &jsonfmt::to_line(&timing)?)?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&jsonfmt::to_line(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Gradients for every store tensor, zeros where none flowed.
fn collect_grads(grads: &mut Gradients, bound: &Bound, store: &ParamStore) -> Vec<Vec<f64>> {
    store
        .ids()
        .map(|id| {
            grads
                .take(bound.var(id))
                .unwrap_or_else(|| vec![0.0; store.get(id).numel()])
        })
        .collect()
}

fn check_dataset(ds: &Dataset) -> Result<()> {
    if ds.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if ds.val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    Ok(())
}

// ---------------------------------------------------------------- estimator

/// Hungarian loss of one frame on a fresh graph; with `aux` every decoder
/// layer contributes its own matched loss.
pub fn estimator_loss(
    model: &KeypointEstimator,
    g: &mut Graph,
    p: &Bound,
    pose: &FramePose,
    config: &TrainConfig,
    aux: bool,
) -> Result<(Var, LossBreakdown)> {
    let grid = render_frame(pose, &config.render());
    let out = model.forward_graph(g, p, &grid)?;
    let targets = targets_from_pose(pose);
    let weights = config.criterion();
    let (mut total, last) = hungarian_loss_graph(g, out.final_logits(), out.final_keypoints(), &targets, &weights)?;
    if aux {
        for l in 0..out.logits.len() - 1 {
            let (extra, _) = hungarian_loss_graph(g, out.logits[l], out.keypoints[l], &targets, &weights)?;
            total = g.add(total, extra)?;
        }
    }
    Ok((total, last))
}

/// Evaluation frames of one video for the estimator.
pub fn estimator_eval_frames(video: &VideoSample, config: &TrainConfig) -> Result<Vec<usize>> {
    sample_uniform(video.len(), config.estimator_eval_frames.min(video.len()))
}

/// Selected-entity poses for the given frames.
pub fn estimate_poses(model: &KeypointEstimator, video: &VideoSample, frames: &[usize], config: &TrainConfig) -> Result<Vec<FramePose>> {
    let render = config.render();
    frames
        .iter()
        .map(|&i| {
            let preds = model.predict(&video.observation(i, &render))?;
            Ok(select_entities(&preds, config.n_object_classes)?.pose)
        })
        .collect()
}

/// Per-frame errors of the estimator and of the mean-pose baseline on the
/// evaluation frames of `videos`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEvaluation {
    pub model: Vec<f64>,
    pub baseline: Vec<f64>,
}

impl PoseEvaluation {
    pub fn model_mpjpe(&self) -> f64 {
        self.model.iter().sum::<f64>() / self.model.len() as f64
    }

    pub fn baseline_mpjpe(&self) -> f64 {
        self.baseline.iter().sum::<f64>() / self.baseline.len() as f64
    }

    /// Fraction of frames where the model error is below the baseline's.
    pub fn beats_baseline(&self) -> f64 {
        let wins = self.model.iter().zip(&self.baseline).filter(|(m, b)| m < b).count();
        wins as f64 / self.model.len() as f64
    }
}

pub fn evaluate_estimator(
    model: &KeypointEstimator,
    videos: &[VideoSample],
    baseline: &FramePose,
    config: &TrainConfig,
    exec: Execution,
) -> Result<PoseEvaluation> {
    if videos.is_empty() {
        return Err(Error::Empty("evaluation videos"));
    }
    let per_video = par::try_map(exec, videos, |v| {
        let frames = estimator_eval_frames(v, config)?;
        let est = estimate_poses(model, v, &frames, config)?;
        let gt: Vec<FramePose> = frames.iter().map(|&i| v.frames[i].clone()).collect();
        let m: Vec<f64> = est.iter().zip(&gt).map(|(e, g)| frame_mpjpe(e, g)).collect();
        let b: Vec<f64> = gt.iter().map(|g| frame_mpjpe(baseline, g)).collect();
        Ok::<_, Error>((m, b))
    })?;
    let mut out = PoseEvaluation {
        model: Vec::new(),
        baseline: Vec::new(),
    };
    for (m, b) in per_video {
        out.model.extend(m);
        out.baseline.extend(b);
    }
    Ok(out)
}

/// Mean of every training-frame pose.
pub fn mean_pose_baseline(train: &[VideoSample]) -> Result<FramePose> {
    let all: Vec<FramePose> = train.iter().flat_map(|v| v.frames.iter().cloned()).collect();
    mean_pose(&all)
}

pub struct EstimatorRun {
    /// Parameters of the best validation epoch.
    pub model: KeypointEstimator,
    pub log: RunLog,
    pub best_epoch: usize,
    pub best_val_mpjpe: f64,
}

/// Trains the keypoint estimator, one frame per step. Writes a run directory
/// when `out` is given.
pub fn train_estimator(ds: &Dataset, config: &TrainConfig, out: Option<&Path>, exec: Execution) -> Result<EstimatorRun> {
    config.validate()?;
    check_dataset(ds)?;
    let mut log = match out {
        Some(dir) => RunLog::create(dir, config)?,
        None => RunLog::in_memory(),
    };
    let mut model = KeypointEstimator::new(config.estimator(), derive_seed(config.seed, STREAM_ESTIMATOR_INIT))?;
    let mut best = model.params.clone();
    let mut best_epoch = 0;
    let mut best_mpjpe = f64::INFINITY;
    let mut opt = AdamW::for_store(config.adamw(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_ESTIMATOR_TRAIN));
    let schedule = config.estimator_schedule();
    let baseline = mean_pose_baseline(&ds.train)?;
    for epoch in 0..schedule.epochs {
        let start = Instant::now();
        let lr = schedule.lr_at(epoch)?;
        let mut items: Vec<(usize, usize)> = Vec::new();
        for (vi, v) in ds.train.iter().enumerate() {
            for _ in 0..config.estimator_frames_per_video {
                items.push((vi, rng.random_range(0..v.len())));
            }
        }
        items.shuffle(&mut rng);
        let (mut sum_total, mut sum_cls, mut sum_kp) = (0.0, 0.0, 0.0);
        for &(vi, fi) in &items {
            let mut pose = ds.train[vi].frames[fi].clone();
            if rng.random::<f64>() < config.flip_prob {
                pose = pose.mirrored();
            }
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let (loss, parts) = estimator_loss(&model, &mut g, &p, &pose, config, config.aux_loss)?;
            sum_total += g.value(loss).item();
            sum_cls += parts.class_loss;
            sum_kp += parts.keypoint_loss;
            let mut grads = g.backward(loss)?;
            let mut flat = collect_grads(&mut grads, &p, &model.params);
            clip_grad_norm(&mut flat, config.grad_clip_norm);
            opt.step_store(&mut model.params, &flat, lr)?;
        }
        let n = items.len() as f64;
        let val = evaluate_estimator(&model, &ds.val, &baseline, config, exec)?.model_mpjpe();
        if val < best_mpjpe {
            best_mpjpe = val;
            best_epoch = epoch;
            best.copy_from(&model.params)?;
        }
        log.append(
            EpochRecord {
                stage: Stage::Estimator,
                epoch,
                lr,
                seed: config.seed,
                steps: items.len(),
                train_loss: sum_total / n,
                train_class_loss: Some(sum_cls / n),
                train_keypoint_loss: Some(sum_kp / n),
                val_mpjpe: Some(val),
                val_top1: None,
                val_loss: None,
            },
            start.elapsed().as_secs_f64(),
        )?;
    }
    model.params.copy_from(&best)?;
    if let Some(dir) = log.dir() {
        checkpoint::save(&dir.join("best.ckpt"), &model.params, config_hash(&model.config)?)?;
    }
    Ok(EstimatorRun {
        model,
        log,
        best_epoch,
        best_val_mpjpe: best_mpjpe,
    })
}

// --------------------------------------------------------------- recognizer

/// Where per-frame poses come from.
#[derive(Clone, Copy)]
pub enum PoseSource<'a> {
    GroundTruth,
    Estimator(&'a KeypointEstimator),
}

/// Every frame's pose for each video: ground truth, or the estimator's
/// selected entities.
pub fn resolve_poses(
    videos: &[VideoSample],
    source: PoseSource<'_>,
    config: &TrainConfig,
    exec: Execution,
) -> Result<Vec<Vec<FramePose>>> {
    match source {
        PoseSource::GroundTruth => Ok(videos.iter().map(|v| v.frames.clone()).collect()),
        PoseSource::Estimator(model) => {
            let items: Vec<(usize, usize)> = videos
                .iter()
                .enumerate()
                .flat_map(|(vi, v)| (0..v.len()).map(move |fi| (vi, fi)))
                .collect();
            let poses = par::try_map(exec, &items, |&(vi, fi)| {
                Ok::<_, Error>(estimate_poses(model, &videos[vi], &[fi], config)?.remove(0))
            })?;
            let mut it = poses.into_iter();
            Ok(videos.iter().map(|v| it.by_ref().take(v.len()).collect()).collect())
        }
    }
}

/// Test-time frame indices of video `index` within its split. The clip
/// sampler draws one random frame per clip from a fixed evaluation stream.
pub fn eval_indices(config: &TrainConfig, index: usize, len: usize) -> Result<Vec<usize>> {
    let spec = config.sampler(Phase::Test);
    match spec.strategy {
        Strategy::Uniform => sample_uniform(len, spec.count),
        Strategy::NClips => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(config.seed, STREAM_EVAL), index as u64));
            sample_n_clips_train(len, spec.count, &mut rng)
        }
    }
}

/// Prediction for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    pub id: String,
    pub predicted: usize,
    pub label: usize,
    pub logits: Vec<f64>,
}

impl VideoPrediction {
    /// Top logit minus runner-up.
    pub fn margin(&self) -> f64 {
        let mut sorted = self.logits.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted.len() < 2 {
            return f64::INFINITY;
        }
        sorted[0] - sorted[1]
    }

    pub fn cross_entropy(&self) -> f64 {
        log_sum_exp(&self.logits) - self.logits[self.label]
    }
}

/// Samples frames, tokenizes the chosen poses and takes the argmax.
pub fn classify_video(
    model: &ActionRecognizer,
    video: &VideoSample,
    poses: &[FramePose],
    indices: &[usize],
) -> Result<VideoPrediction> {
    if poses.len() != video.len() {
        return Err(Error::Shape(format!("{} poses for {} frames", poses.len(), video.len())));
    }
    let chosen: Vec<FramePose> = indices.iter().map(|&i| poses[i].clone()).collect();
    let logits = model.logits(&chosen)?;
    Ok(VideoPrediction {
        id: video.id.clone(),
        predicted: argmax(&logits),
        label: video.action_id,
        logits,
    })
}

pub fn evaluate_recognizer(
    model: &ActionRecognizer,
    videos: &[VideoSample],
    poses: &[Vec<FramePose>],
    config: &TrainConfig,
    exec: Execution,
) -> Result<Vec<VideoPrediction>> {
    if videos.len() != poses.len() {
        return Err(Error::Shape("pose lists do not match videos".into()));
    }
    par::try_map_range(exec, videos.len(), |i| {
        let idx = eval_indices(config, i, videos[i].len())?;
        classify_video(model, &videos[i], &poses[i], &idx)
    })
}

pub fn top1_of(preds: &[VideoPrediction]) -> Result<f64> {
    let p: Vec<usize> = preds.iter().map(|v| v.predicted).collect();
    let l: Vec<usize> = preds.iter().map(|v| v.label).collect();
    evaluate_top1(&p, &l)
}

pub struct RecognizerRun {
    pub model: ActionRecognizer,
    pub log: RunLog,
    pub best_epoch: usize,
    pub best_val_top1: f64,
}

/// Trains the action recognizer, one video per step. The best epoch has the
/// highest validation top-1, then the lowest validation loss.
pub fn train_recognizer(
    ds: &Dataset,
    source: PoseSource<'_>,
    config: &TrainConfig,
    out: Option<&Path>,
    exec: Execution,
) -> Result<RecognizerRun> {
    config.validate()?;
    check_dataset(ds)?;
    let train_poses = resolve_poses(&ds.train, source, config, exec)?;
    let val_poses = resolve_poses(&ds.val, source, config, exec)?;
    train_recognizer_on(ds, &train_poses, &val_poses, config, out, exec)
}

/// As [`train_recognizer`] with poses already resolved.
pub fn train_recognizer_on(
    ds: &Dataset,
    train_poses: &[Vec<FramePose>],
    val_poses: &[Vec<FramePose>],
    config: &TrainConfig,
    out: Option<&Path>,
    exec: Execution,
) -> Result<RecognizerRun> {
    config.validate()?;
    check_dataset(ds)?;
    let mut log = match out {
        Some(dir) => RunLog::create(dir, config)?,
        None => RunLog::in_memory(),
    };
    let mut model = ActionRecognizer::new(config.recognizer(), derive_seed(config.seed, STREAM_RECOGNIZER_INIT))?;
    let mut best = model.params.clone();
    let mut best_key = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best_epoch = 0;
    let mut opt = AdamW::for_store(config.adamw(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_RECOGNIZER_TRAIN));
    let schedule = config.recognizer_schedule();
    let sampler = config.sampler(Phase::Train);
    for epoch in 0..schedule.epochs {
        let start = Instant::now();
        let lr = schedule.lr_at(epoch)?;
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &vi in &order {
            let v = &ds.train[vi];
            let idx = sampler.sample(v.len(), &mut rng)?;
            let flip = rng.random::<f64>() < config.flip_prob;
            let chosen: Vec<FramePose> = idx
                .iter()
                .map(|&i| {
                    let p = &train_poses[vi][i];
                    if flip {
                        p.mirrored()
                    } else {
                        p.clone()
                    }
                })
                .collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let logits = model.forward_graph(&mut g, &p, &chosen)?;
            let loss = g.cross_entropy(logits, &[v.action_id], &[1.0], 1.0)?;
            sum += g.value(loss).item();
            let mut grads = g.backward(loss)?;
            let mut flat = collect_grads(&mut grads, &p, &model.params);
            clip_grad_norm(&mut flat, config.grad_clip_norm);
            opt.step_store(&mut model.params, &flat, lr)?;
        }
        let preds = evaluate_recognizer(&model, &ds.val, val_poses, config, exec)?;
        let top1 = top1_of(&preds)?;
        let val_loss = preds.iter().map(VideoPrediction::cross_entropy).sum::<f64>() / preds.len() as f64;
        if top1 > best_key.0 || (top1 == best_key.0 && val_loss < best_key.1) {
            best_key = (top1, val_loss);
            best_epoch = epoch;
            best.copy_from(&model.params)?;
        }
        log.append(
            EpochRecord {
                stage: Stage::Recognizer,
                epoch,
                lr,
                seed: config.seed,
                steps: order.len(),
                train_loss: sum / order.len() as f64,
                train_class_loss: None,
                train_keypoint_loss: None,
                val_mpjpe: None,
                val_top1: Some(top1),
                val_loss: Some(val_loss),
            },
            start.elapsed().as_secs_f64(),
        )?;
    }
    model.params.copy_from(&best)?;
    if let Some(dir) = log.dir() {
        checkpoint::save(&dir.join("best.ckpt"), &model.params, config_hash(&model.config)?)?;
    }
    Ok(RecognizerRun {
        model,
        log,
        best_epoch,
        best_val_top1: best_key.0,
    })
}

/// Loads an estimator saved by [`train_estimator`].
pub fn load_estimator(path: &Path, config: &TrainConfig) -> Result<KeypointEstimator> {
    let mut model = KeypointEstimator::new(config.estimator(), 0)?;
    checkpoint::load_into(path, &mut model.params, config_hash(&model.config)?)?;
    Ok(model)
}

/// Loads a recognizer saved by [`train_recognizer`].
pub fn load_recognizer(path: &Path, config: &TrainConfig) -> Result<ActionRecognizer> {
    let mut model = ActionRecognizer::new(config.recognizer(), 0)?;
    checkpoint::load_into(path, &mut model.params, config_hash(&model.config)?)?;
    Ok(model)
}
