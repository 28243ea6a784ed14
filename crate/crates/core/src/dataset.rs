//! Class-balanced synthetic datasets and their on-disk form.
//!
//! Directory layout:
//!
//! ```text
//! meta.json          format version, config echo, class names, split counts
//! manifest.tsv       video_id, split, action_id
//! videos/<id>.rec    one record per video
//! ```
//!
//! A record is little-endian: `b"EGOVID\0\0"`, `u32` version, `u32` id
//! length, id, `u32` action id, `u32` T, `u32` channels, `u32` height,
//! `u32` width (all three 0 when no grids are stored), then per frame the
//! 189 pose values as `f64` (left, right, object) and the object class as
//! `u32`, then, if present, every frame's grid as `f32`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::par::{self, Execution};
use crate::render::ObservationGrid;
use crate::scene::{FramePose, POSE_DIM};
use crate::synth::{action_name, derive_seed, generate_video, object_name, VideoSample};

pub const FORMAT_VERSION: u32 = 1;
const RECORD_MAGIC: &[u8; 8] = b"EGOVID\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: TrainConfig,
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[VideoSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub config: TrainConfig,
    pub action_names: Vec<String>,
    pub object_names: Vec<String>,
    pub counts: SplitCounts,
    pub grids_stored: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Videos per class for each split, in split order.
fn plan(config: &TrainConfig) -> Vec<(Split, usize, u64)> {
    let mut out = Vec::new();
    let mut index = 0u64;
    for (split, per_class) in [
        (Split::Train, config.train_per_class),
        (Split::Val, config.val_per_class),
        (Split::Test, config.test_per_class),
    ] {
        for _ in 0..per_class {
            for action in 0..config.n_actions {
                out.push((split, action, derive_seed(config.seed, index)));
                index += 1;
            }
        }
    }
    out
}

/// Generates every split; each class appears `*_per_class` times per split.
pub fn generate_dataset(config: &TrainConfig, exec: Execution) -> Result<Dataset> {
    config.validate()?;
    let scene = config.scene();
    let items = plan(config);
    let videos = par::try_map(exec, &items, |&(_, action, seed)| {
        let v = generate_video(action, seed, &scene)?;
        Ok::<_, Error>(if config.store_grids {
            v.with_grids(&scene.render)
        } else {
            v
        })
    })?;
    let mut ds = Dataset {
        config: config.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for ((split, _, _), v) in items.into_iter().zip(videos) {
        match split {
            Split::Train => ds.train.push(v),
            Split::Val => ds.val.push(v),
            Split::Test => ds.test.push(v),
        }
    }
    Ok(ds)
}

pub fn encode_record(v: &VideoSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + v.len() * (POSE_DIM * 8 + 4));
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.id.len() as u32).to_le_bytes());
    out.extend_from_slice(v.id.as_bytes());
    out.extend_from_slice(&(v.action_id as u32).to_le_bytes());
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    let dims = v
        .grids
        .as_ref()
        .and_then(|g| g.first())
        .map_or((0, 0, 0), ObservationGrid::dims);
    for d in [dims.0, dims.1, dims.2] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for f in &v.frames {
        for x in f.to_flat() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(f.object.class_id as u32).to_le_bytes());
    }
    if let Some(grids) = &v.grids {
        for g in grids {
            for &x in g.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_record(bytes: &[u8]) -> std::result::Result<VideoSample, String> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(8)? != RECORD_MAGIC {
        return Err("bad record magic".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(format!("unsupported record version {version}"));
    }
    let id_len = r.u32()?;
    let id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| "video id is not UTF-8".to_string())?;
    let action_id = r.u32()?;
    let len = r.u32()?;
    let (c, h, w) = (r.u32()?, r.u32()?, r.u32()?);
    let mut frames = Vec::with_capacity(len);
    for _ in 0..len {
        let flat: Vec<f64> = r
            .take(POSE_DIM * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let class = r.u32()?;
        frames.push(FramePose::from_flat(&flat, class).map_err(|e| e.to_string())?);
    }
    let grids = if c * h * w > 0 {
        let mut gs = Vec::with_capacity(len);
        for _ in 0..len {
            let data = r
                .take(c * h * w * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            gs.push(ObservationGrid::from_data(c, h, w, data).map_err(|e| e.to_string())?);
        }
        Some(gs)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(VideoSample {
        id,
        action_id,
        frames,
        grids,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let videos = dir.join("videos");
    fs::create_dir_all(&videos).map_err(|e| Error::io(&videos, e))?;
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        config: ds.config.clone(),
        action_names: (0..ds.config.n_actions).map(action_name).collect(),
        object_names: (0..ds.config.n_object_classes).map(object_name).collect(),
        counts: SplitCounts {
            train: ds.train.len(),
            val: ds.val.len(),
            test: ds.test.len(),
        },
        grids_stored: ds.config.store_grids,
    };
    write(&dir.join("meta.json"), jsonfmt::to_pretty(&meta)?.as_bytes())?;
    let mut manifest = String::from("video_id\tsplit\taction_id\n");
    for split in Split::ALL {
        for v in ds.split(split) {
            manifest.push_str(&format!("{}\t{split}\t{}\n", v.id, v.action_id));
            write(&videos.join(format!("{}.rec", v.id)), &encode_record(v))?;
        }
    }
    write(&dir.join("manifest.tsv"), manifest.as_bytes())
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported dataset version {}", meta.format_version),
        ));
    }
    Ok(meta)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let mpath = dir.join("manifest.tsv");
    let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut ds = Dataset {
        config: meta.config,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (n, line) in manifest.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(&mpath, format!("line {}: expected 3 columns", n + 1)));
        }
        let split: Split = cols[1].parse().map_err(|_| Error::format(&mpath, format!("line {}: bad split", n + 1)))?;
        let rpath = dir.join("videos").join(format!("{}.rec", cols[0]));
        let bytes = fs::read(&rpath).map_err(|e| Error::io(&rpath, e))?;
        let v = decode_record(&bytes).map_err(|r| Error::format(&rpath, r))?;
        if v.id != cols[0] || cols[2].parse::<usize>().ok() != Some(v.action_id) {
            return Err(Error::format(&rpath, "record disagrees with manifest"));
        }
        match split {
            Split::Train => ds.train.push(v),
            Split::Val => ds.val.push(v),
            Split::Test => ds.test.push(v),
        }
    }
    let counts = SplitCounts {
        train: ds.train.len(),
        val: ds.val.len(),
        test: ds.test.len(),
    };
    if counts != meta.counts {
        return Err(Error::format(&mpath, "split counts disagree with meta.json"));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            train_per_class: 2,
            val_per_class: 1,
            test_per_class: 1,
            n_clips: 16,
            frames: 16,
            min_frames: 20,
            max_frames: 30,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn balanced_and_deterministic() {
        let c = tiny();
        let a = generate_dataset(&c, Execution::Parallel).unwrap();
        let b = generate_dataset(&c, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (16, 8, 8));
        for k in 0..8 {
            assert_eq!(a.train.iter().filter(|v| v.action_id == k).count(), 2);
        }
    }

    #[test]
    fn disk_round_trip() {
        let c = TrainConfig {
            store_grids: true,
            ..tiny()
        };
        let ds = generate_dataset(
            &TrainConfig {
                train_per_class: 1,
                val_per_class: 0,
                test_per_class: 0,
                n_actions: 2,
                ..c
            },
            Execution::Parallel,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.train[0].frames, ds.train[0].frames);
        let g0 = &ds.train[0].grids.as_ref().unwrap()[3];
        let g1 = &back.train[0].grids.as_ref().unwrap()[3];
        assert!(g0.max_abs_diff(g1) < 1e-7);
    }

    #[test]
    fn record_rejects_truncation() {
        let ds = generate_dataset(
            &TrainConfig {
                train_per_class: 1,
                val_per_class: 0,
                test_per_class: 0,
                n_actions: 1,
                ..tiny()
            },
            Execution::Sequential,
        )
        .unwrap();
        let bytes = encode_record(&ds.train[0]);
        assert_eq!(decode_record(&bytes).unwrap(), ds.train[0]);
        assert!(decode_record(&bytes[..bytes.len() - 1]).is_err());
    }
}
