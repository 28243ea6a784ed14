//! Frame-index samplers for training and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Evenly spaced clip centres.
    Uniform,
    /// One random frame per equal-length clip during training; clip centres
    /// at test time.
    NClips,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Uniform => "uniform",
            Strategy::NClips => "n_clips",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "n_clips" | "n-clips" | "nclips" => Ok(Strategy::NClips),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampler {other:?} (expected uniform or n_clips)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Test,
}

/// A sampler: strategy, number of indices, and phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub strategy: Strategy,
    pub count: usize,
    pub phase: Phase,
}

impl SamplerSpec {
    pub fn new(strategy: Strategy, count: usize, phase: Phase) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("sampler count must be >= 1".into()));
        }
        Ok(SamplerSpec {
            strategy,
            count,
            phase,
        })
    }

    /// Indices for a video of `len` frames. Only the random training arm
    /// consumes `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<Vec<usize>> {
        match (self.strategy, self.phase) {
            (Strategy::NClips, Phase::Train) => sample_n_clips_train(len, self.count, rng),
            (Strategy::NClips, Phase::Test) => sample_n_clips_test(len, self.count),
            (Strategy::Uniform, _) => sample_uniform(len, self.count),
        }
    }
}

fn check(len: usize, count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    if len < count {
        return Err(Error::InvalidArgument(format!(
            "video of {len} frames cannot supply {count} samples"
        )));
    }
    Ok(())
}

/// Clip `i` of `n` over `len` frames: `[⌊i·len/n⌋, ⌊(i+1)·len/n⌋)`.
pub fn clip_bounds(len: usize, n: usize, i: usize) -> (usize, usize) {
    (i * len / n, (i + 1) * len / n)
}

/// One uniformly random frame from each of `n` equal clips.
pub fn sample_n_clips_train<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    check(len, n)?;
    Ok((0..n)
        .map(|i| {
            let (lo, hi) = clip_bounds(len, n, i);
            rng.random_range(lo..hi)
        })
        .collect())
}

/// Clip centres `⌊(i + 0.5)·len/n⌋`. Strictly increasing and in range, but
/// when `len/n < 2` the floor can land in the next clip.
pub fn sample_n_clips_test(len: usize, n: usize) -> Result<Vec<usize>> {
    check(len, n)?;
    // integer form of floor((2i + 1)·len / 2n)
    Ok((0..n).map(|i| (2 * i + 1) * len / (2 * n)).collect())
}

/// Evenly spaced frames by the clip-centre rule with `frames` clips.
pub fn sample_uniform(len: usize, frames: usize) -> Result<Vec<usize>> {
    sample_n_clips_test(len, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Strategy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_n_clips_train(16, 16, &mut rng).unwrap(),
            (0..16).collect::<Vec<_>>()
        );
        for _ in 0..50 {
            let idx = sample_n_clips_train(20, 10, &mut rng).unwrap();
            for (i, &v) in idx.iter().enumerate() {
                assert!(v == 2 * i || v == 2 * i + 1);
            }
        }
        assert!(sample_n_clips_train(5, 6, &mut rng).is_err());
    }

    #[test]
    fn test_examples() {
        let odd: Vec<usize> = (0..64).map(|i| 2 * i + 1).collect();
        assert_eq!(sample_n_clips_test(128, 64).unwrap(), odd);
        assert_eq!(
            sample_n_clips_test(64, 64).unwrap(),
            (0..64).collect::<Vec<_>>()
        );
        let direct: Vec<usize> = (0..64)
            .map(|i| ((i as f64 + 0.5) * 70.0 / 64.0).floor() as usize)
            .collect();
        assert_eq!(sample_n_clips_test(70, 64).unwrap(), direct);
        assert!(sample_n_clips_test(63, 64).is_err());
    }

    #[test]
    fn uniform_examples() {
        let odd: Vec<usize> = (0..32).map(|i| 2 * i + 1).collect();
        assert_eq!(sample_uniform(64, 32).unwrap(), odd);
        assert_eq!(sample_uniform(97, 1).unwrap(), vec![48]);
        assert!(sample_uniform(10, 0).is_err());
    }

    #[test]
    fn clip_centre_can_leave_its_clip() {
        // floor((i + 0.5)·5/4) = 3 for i = 2, while clip 2 is [2, 3)
        assert_eq!(sample_n_clips_test(5, 4).unwrap(), vec![0, 1, 3, 4]);
        assert_eq!(clip_bounds(5, 4, 2), (2, 3));
    }

    #[test]
    fn parse_strategy() {
        assert_eq!("n_clips".parse::<Strategy>().unwrap(), Strategy::NClips);
        assert_eq!("uniform".parse::<Strategy>().unwrap(), Strategy::Uniform);
        assert!("dense".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn samplers_increasing_in_range(len in 1usize..400, n in 1usize..400, seed in any::<u64>()) {
            prop_assume!(n <= len);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = sample_n_clips_train(len, n, &mut rng).unwrap();
            for idx in [
                train.clone(),
                sample_n_clips_test(len, n).unwrap(),
                sample_uniform(len, n).unwrap(),
            ] {
                prop_assert_eq!(idx.len(), n);
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(idx.iter().all(|&i| i < len));
            }
            for (i, &v) in train.iter().enumerate() {
                let (lo, hi) = clip_bounds(len, n, i);
                prop_assert!(lo <= v && v < hi);
            }
        }
    }
}
