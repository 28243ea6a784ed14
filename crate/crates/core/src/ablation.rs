//! Frame-sampling ablation: four train/test sampler arms, each trained and
//! tested once per seed on ground-truth poses.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::jsonfmt::f17;
use crate::par::{self, Execution};
use crate::sampling::Strategy;
use crate::train::{evaluate_recognizer, resolve_poses, top1_of, train_recognizer_on, PoseSource};

/// Published test accuracies (%) of the four arms, for reference only.
pub const PAPER_ACCURACY: [f64; 4] = [83.40, 84.71, 86.36, 87.19];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationArm {
    pub sampler_train: Strategy,
    pub sampler_test: Strategy,
    pub frames: usize,
}

/// Arms in table order.
pub const ARMS: [AblationArm; 4] = [
    AblationArm {
        sampler_train: Strategy::Uniform,
        sampler_test: Strategy::Uniform,
        frames: 32,
    },
    AblationArm {
        sampler_train: Strategy::Uniform,
        sampler_test: Strategy::Uniform,
        frames: 64,
    },
    AblationArm {
        sampler_train: Strategy::NClips,
        sampler_test: Strategy::NClips,
        frames: 64,
    },
    AblationArm {
        sampler_train: Strategy::NClips,
        sampler_test: Strategy::Uniform,
        frames: 64,
    },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// 1-based arm number.
    pub arm: usize,
    pub sampler_train: Strategy,
    pub sampler_test: Strategy,
    pub frames: usize,
    pub accuracy: f64,
    pub seed: u64,
    pub paper_accuracy: f64,
}

/// `base` with the arm's samplers and frame count and the given seed.
pub fn arm_config(base: &TrainConfig, arm: &AblationArm, seed: u64) -> TrainConfig {
    TrainConfig {
        sampler_train: arm.sampler_train,
        sampler_test: arm.sampler_test,
        frames: arm.frames,
        n_clips: arm.frames,
        seed,
        ..base.clone()
    }
}

/// Trains and tests every arm for every seed; rows are arm-major, then
/// seed order.
pub fn run_sampling_ablation(ds: &Dataset, base: &TrainConfig, seeds: &[u64], exec: Execution) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Empty("seeds"));
    }
    let train = resolve_poses(&ds.train, PoseSource::GroundTruth, base, exec)?;
    let val = resolve_poses(&ds.val, PoseSource::GroundTruth, base, exec)?;
    let test = resolve_poses(&ds.test, PoseSource::GroundTruth, base, exec)?;
    if ds.test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let jobs: Vec<(usize, u64)> = (0..ARMS.len()).flat_map(|a| seeds.iter().map(move |&s| (a, s))).collect();
    par::try_map(exec, &jobs, |&(a, seed)| {
        let cfg = arm_config(base, &ARMS[a], seed);
        // the runs themselves fan out; evaluation inside stays sequential
        let run = train_recognizer_on(ds, &train, &val, &cfg, None, Execution::Sequential)?;
        let preds = evaluate_recognizer(&run.model, &ds.test, &test, &cfg, Execution::Sequential)?;
        Ok(AblationRow {
            arm: a + 1,
            sampler_train: ARMS[a].sampler_train,
            sampler_test: ARMS[a].sampler_test,
            frames: ARMS[a].frames,
            accuracy: top1_of(&preds)?,
            seed,
            paper_accuracy: PAPER_ACCURACY[a],
        })
    })
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from("arm\tsampler_train\tsampler_test\tframes\taccuracy\tseed\tpaper_accuracy\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.arm,
            r.sampler_train,
            r.sampler_test,
            r.frames,
            f17(r.accuracy),
            r.seed,
            f17(r.paper_accuracy)
        ));
    }
    s
}

/// Mean accuracy per arm, in arm order.
pub fn arm_means(rows: &[AblationRow]) -> [f64; 4] {
    let mut out = [f64::NAN; 4];
    for (a, m) in out.iter_mut().enumerate() {
        let accs: Vec<f64> = rows.iter().filter(|r| r.arm == a + 1).map(|r| r.accuracy).collect();
        if !accs.is_empty() {
            *m = accs.iter().sum::<f64>() / accs.len() as f64;
        }
    }
    out
}
