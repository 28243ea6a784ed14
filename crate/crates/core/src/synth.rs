//! Procedural two-hands-plus-object videos.
//!
//! Each action class is a closed-form trajectory of object centre, object
//! orientation, both wrists and finger curl over normalized time
//! `t = i / (T − 1)`. Per-video parameters (start positions, object size,
//! amplitude) are drawn from a seeded RNG; per-frame Gaussian jitter is
//! added to the object centre and both wrists.
//!
//! | id | name       | signature                                                  |
//! |----|------------|------------------------------------------------------------|
//! | 0  | lift-tilt  | right hand lifts the object and tilts it                   |
//! | 1  | put-down   | time reverse of lift-tilt                                  |
//! | 2  | reach      | both hands converge on the static object and close         |
//! | 3  | release    | time reverse of reach                                      |
//! | 4  | rotate     | both hands turn the object about its vertical axis         |
//! | 5  | shake      | right hand shakes the object left-right (2.5 periods)      |
//! | 6  | hand-over  | object carried from the left hand to the right hand        |
//! | 7  | push-away  | right hand pushes the object away in depth                 |
//!
//! Classes beyond 8 reuse these signatures with mirrored roles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{render_frame, ObservationGrid, RenderConfig};
use crate::scene::{
    make_hand_keypoints, make_object_keypoints, FramePose, Point, Side,
};

pub const ACTION_NAMES: [&str; 8] = [
    "lift-tilt",
    "put-down",
    "reach",
    "release",
    "rotate",
    "shake",
    "hand-over",
    "push-away",
];

pub const OBJECT_NAMES: [&str; 4] = ["box", "bottle", "book", "cup"];

const OBJECT_SHAPES: [[f64; 3]; 4] = [
    [0.050, 0.050, 0.050],
    [0.030, 0.070, 0.030],
    [0.065, 0.045, 0.018],
    [0.040, 0.045, 0.040],
];

const MAX_ATTEMPTS: usize = 24;

pub fn action_name(id: usize) -> String {
    match ACTION_NAMES.get(id) {
        Some(n) => (*n).to_string(),
        None => format!("{}-mirrored-{}", ACTION_NAMES[id % 8], id / 8),
    }
}

pub fn object_name(id: usize) -> String {
    match OBJECT_NAMES.get(id) {
        Some(n) => (*n).to_string(),
        None => format!("object-{id}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_actions: usize,
    pub n_object_classes: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub jitter_std: f64,
    pub render: RenderConfig,
    /// Render grids eagerly in [`generate_video`].
    pub render_grids: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_actions: 8,
            n_object_classes: 4,
            min_frames: 96,
            max_frames: 160,
            jitter_std: 0.01,
            render: RenderConfig::default(),
            render_grids: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_actions == 0 || self.n_object_classes == 0 {
            return Err(Error::Config("need at least one action and object class".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "frame range [{}, {}] is empty",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.jitter_std >= 0.0) {
            return Err(Error::Config("jitter_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// One synthetic video: ground-truth poses, optional rendered grids and the
/// action label.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub action_id: usize,
    pub frames: Vec<FramePose>,
    /// Present when rendered eagerly or loaded from disk.
    pub grids: Option<Vec<ObservationGrid>>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn object_class(&self) -> usize {
        self.frames.first().map_or(0, |f| f.object.class_id)
    }

    /// Observation for frame `i`: the stored grid, or a fresh render.
    pub fn observation(&self, i: usize, config: &RenderConfig) -> ObservationGrid {
        match &self.grids {
            Some(g) => g[i].clone(),
            None => render_frame(&self.frames[i], config),
        }
    }

    pub fn with_grids(mut self, config: &RenderConfig) -> Self {
        self.grids = Some(self.frames.iter().map(|f| render_frame(f, config)).collect());
        self
    }
}

/// Mirror the whole video. Stored grids are mirrored with the hand channels
/// swapped, which equals re-rendering the mirrored poses.
pub fn horizontal_flip(sample: &VideoSample) -> VideoSample {
    VideoSample {
        id: sample.id.clone(),
        action_id: sample.action_id,
        frames: sample.frames.iter().map(FramePose::mirrored).collect(),
        grids: sample
            .grids
            .as_ref()
            .map(|gs| gs.iter().map(ObservationGrid::mirrored_swapped).collect()),
    }
}

/// Per-video draw of the kinematic parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionParams {
    pub action_id: usize,
    pub object_class: usize,
    pub half_extents: [f64; 3],
    pub object_center: Point,
    pub object_yaw: f64,
    pub left_rest: Point,
    pub right_rest: Point,
    pub curl_rest: f64,
    pub curl_grasp: f64,
    pub amplitude: f64,
}

/// Everything needed to produce a video except the per-frame jitter.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPlan {
    pub params: MotionParams,
    pub length: usize,
}

struct EntityState {
    object_center: Point,
    object_ypr: [f64; 3],
    left_wrist: Point,
    right_wrist: Point,
    left_curl: f64,
    right_curl: f64,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn lerp(a: Point, b: Point, w: f64) -> Point {
    [
        a[0] + (b[0] - a[0]) * w,
        a[1] + (b[1] - a[1]) * w,
        a[2] + (b[2] - a[2]) * w,
    ]
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

const LEFT_ROLL: f64 = 0.45;
const RIGHT_ROLL: f64 = -0.45;

impl MotionParams {
    fn draw<R: Rng>(rng: &mut R, action_id: usize, n_object_classes: usize) -> Self {
        let object_class = rng.random_range(0..n_object_classes);
        let shape = OBJECT_SHAPES[object_class % OBJECT_SHAPES.len()];
        let scale = rng.random_range(0.85..1.15);
        let object_center = [
            rng.random_range(0.44..0.56),
            rng.random_range(0.40..0.50),
            rng.random_range(0.45..0.55),
        ];
        let spread = |rng: &mut R, lo: f64, hi: f64| rng.random_range(lo..hi);
        let left_rest = [
            object_center[0] - spread(rng, 0.22, 0.26),
            object_center[1] + spread(rng, 0.14, 0.18),
            object_center[2] + spread(rng, -0.03, 0.03),
        ];
        let right_rest = [
            object_center[0] + spread(rng, 0.22, 0.26),
            object_center[1] + spread(rng, 0.14, 0.18),
            object_center[2] + spread(rng, -0.03, 0.03),
        ];
        MotionParams {
            action_id,
            object_class,
            half_extents: shape.map(|h| h * scale),
            object_center,
            object_yaw: rng.random_range(-0.4..0.4),
            left_rest,
            right_rest,
            curl_rest: rng.random_range(0.1..0.3),
            curl_grasp: rng.random_range(0.6..0.8),
            amplitude: rng.random_range(0.8..1.2),
        }
    }

    fn grasp_offset(&self, side: Side) -> Point {
        let dx = self.half_extents[0] + 0.04;
        match side {
            Side::Left => [-dx, 0.09, 0.0],
            Side::Right => [dx, 0.09, 0.0],
        }
    }

    /// Closed-form entity state at normalized time `t`, motion scaled by
    /// `shrink`.
    fn state(&self, t: f64, shrink: f64) -> EntityState {
        let a = self.amplitude * shrink;
        let s = smoothstep(t);
        let c0 = self.object_center;
        let base_ypr = [self.object_yaw, 0.0, 0.0];
        let mut st = EntityState {
            object_center: c0,
            object_ypr: base_ypr,
            left_wrist: self.left_rest,
            right_wrist: self.right_rest,
            left_curl: self.curl_rest,
            right_curl: self.curl_rest,
        };
        let grasp_l = self.grasp_offset(Side::Left);
        let grasp_r = self.grasp_offset(Side::Right);
        let kind = self.action_id % 8;
        let mirrored = (self.action_id / 8) % 2 == 1;
        match kind {
            0 | 1 => {
                let w = if kind == 0 { s } else { 1.0 - s };
                st.object_center = add(c0, [0.0, -0.2 * a * w, 0.0]);
                st.object_ypr = [self.object_yaw, 0.0, 0.6 * a * w];
                st.right_wrist = add(st.object_center, grasp_r);
                st.right_curl = self.curl_grasp;
            }
            2 | 3 => {
                let w = if kind == 2 { s } else { 1.0 - s };
                st.left_wrist = lerp(self.left_rest, add(c0, grasp_l), w);
                st.right_wrist = lerp(self.right_rest, add(c0, grasp_r), w);
                let curl = self.curl_rest + (self.curl_grasp - self.curl_rest) * w;
                st.left_curl = curl;
                st.right_curl = curl;
            }
            4 => {
                let psi = 1.6 * a * t;
                st.object_ypr = [self.object_yaw + psi, 0.0, 0.0];
                let (sn, cs) = psi.sin_cos();
                let turn = |o: Point| [o[0] * cs + o[2] * sn, o[1], -o[0] * sn + o[2] * cs];
                st.left_wrist = add(c0, turn(grasp_l));
                st.right_wrist = add(c0, turn(grasp_r));
                st.left_curl = self.curl_grasp;
                st.right_curl = self.curl_grasp;
            }
            5 => {
                let dx = 0.07 * a * (2.0 * std::f64::consts::PI * 2.5 * t).sin();
                st.object_center = add(c0, [dx, 0.0, 0.0]);
                st.right_wrist = add(st.object_center, grasp_r);
                st.right_curl = self.curl_grasp;
            }
            6 => {
                let x = -0.12 * a + 0.24 * a * s;
                let y = -0.06 * a * (std::f64::consts::PI * t).sin();
                st.object_center = add(c0, [x, y, 0.0]);
                let hold_left = 1.0 - smoothstep((t - 0.4) / 0.2);
                let hold_right = smoothstep((t - 0.4) / 0.2);
                st.left_wrist = lerp(self.left_rest, add(st.object_center, grasp_l), hold_left);
                st.right_wrist =
                    lerp(self.right_rest, add(st.object_center, grasp_r), hold_right);
                st.left_curl = self.curl_rest + (self.curl_grasp - self.curl_rest) * hold_left;
                st.right_curl = self.curl_rest + (self.curl_grasp - self.curl_rest) * hold_right;
            }
            _ => {
                st.object_center = add(c0, [0.0, 0.0, 0.18 * a * s]);
                st.right_wrist = add(st.object_center, add(grasp_r, [0.0, 0.0, -0.02]));
                st.right_curl = 0.5 * (self.curl_rest + self.curl_grasp);
            }
        }
        if mirrored {
            // swap hand roles about the object's vertical axis
            let mx = |p: Point| [2.0 * c0[0] - p[0], p[1], p[2]];
            let (l, r) = (mx(st.right_wrist), mx(st.left_wrist));
            st.left_wrist = l;
            st.right_wrist = r;
            std::mem::swap(&mut st.left_curl, &mut st.right_curl);
            st.object_center = mx(st.object_center);
            st.object_ypr = [-st.object_ypr[0], 0.0, -st.object_ypr[2]];
        }
        st
    }
}

fn build_pose(params: &MotionParams, st: &EntityState) -> Result<FramePose> {
    Ok(FramePose {
        left: make_hand_keypoints(Side::Left, st.left_wrist, LEFT_ROLL, st.left_curl)?,
        right: make_hand_keypoints(Side::Right, st.right_wrist, RIGHT_ROLL, st.right_curl)?,
        object: make_object_keypoints(
            st.object_center,
            params.half_extents,
            st.object_ypr,
            params.object_class,
        )?,
    })
}

/// Derives a child seed; distinct `(seed, stream)` pairs give independent
/// streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn video_rng(action_id: usize, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, action_id as u64))
}

impl VideoPlan {
    /// Noise-free pose at frame `i` with motion scaled by `shrink`.
    pub fn pose_at(&self, i: usize, shrink: f64) -> Result<FramePose> {
        let t = if self.length > 1 {
            i as f64 / (self.length - 1) as f64
        } else {
            0.0
        };
        build_pose(&self.params, &self.params.state(t, shrink))
    }
}

/// Draws the per-video parameters exactly as [`generate_video`] does.
pub fn plan_video(action_id: usize, seed: u64, config: &SceneConfig) -> Result<VideoPlan> {
    let mut rng = video_rng(action_id, seed);
    plan_with(&mut rng, action_id, config)
}

fn plan_with(rng: &mut ChaCha8Rng, action_id: usize, config: &SceneConfig) -> Result<VideoPlan> {
    config.validate()?;
    if action_id >= config.n_actions {
        return Err(Error::InvalidArgument(format!(
            "action {action_id} outside [0, {})",
            config.n_actions
        )));
    }
    let length = rng.random_range(config.min_frames..=config.max_frames);
    let params = MotionParams::draw(rng, action_id, config.n_object_classes);
    Ok(VideoPlan { params, length })
}

/// Generates one video as a pure function of `(action_id, seed, config)`.
///
/// If a frame leaves the unit cube the motion amplitude shrinks by 0.8 and
/// the jitter is redrawn.
pub fn generate_video(action_id: usize, seed: u64, config: &SceneConfig) -> Result<VideoSample> {
    let mut rng = video_rng(action_id, seed);
    let plan = plan_with(&mut rng, action_id, config)?;
    let normal = Normal::new(0.0, config.jitter_std)
        .map_err(|e| Error::Config(format!("jitter: {e}")))?;
    let mut shrink = 1.0;
    for _ in 0..MAX_ATTEMPTS {
        match generate_frames(&plan, shrink, &normal, &mut rng) {
            Ok(frames) => {
                let sample = VideoSample {
                    id: format!("a{action_id:02}-s{seed:016x}"),
                    action_id,
                    frames,
                    grids: None,
                };
                return Ok(if config.render_grids {
                    sample.with_grids(&config.render)
                } else {
                    sample
                });
            }
            Err(Error::OutOfBounds(_)) => shrink *= 0.8,
            Err(e) => return Err(e),
        }
    }
    Err(Error::OutOfBounds(format!(
        "action {action_id} seed {seed}: no in-bounds motion after {MAX_ATTEMPTS} attempts"
    )))
}

fn generate_frames(
    plan: &VideoPlan,
    shrink: f64,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FramePose>> {
    let mut frames = Vec::with_capacity(plan.length);
    for i in 0..plan.length {
        let t = if plan.length > 1 {
            i as f64 / (plan.length - 1) as f64
        } else {
            0.0
        };
        let mut st = plan.params.state(t, shrink);
        if noise.std_dev() > 0.0 {
            for p in [&mut st.object_center, &mut st.left_wrist, &mut st.right_wrist] {
                for v in p.iter_mut() {
                    *v += noise.sample(rng);
                }
            }
        }
        frames.push(build_pose(&plan.params, &st)?);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::object_invariant_error;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::default();
        let a = generate_video(3, 11, &cfg).unwrap();
        let b = generate_video(3, 11, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_video(3, 12, &cfg).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn length_in_range_and_in_bounds() {
        let cfg = SceneConfig::default();
        for action in 0..8 {
            for seed in 0..5 {
                let v = generate_video(action, seed, &cfg).unwrap();
                assert!((96..=160).contains(&v.len()));
                assert!(v.frames.iter().all(FramePose::in_bounds));
                assert!(v
                    .frames
                    .iter()
                    .all(|f| object_invariant_error(&f.object) < 1e-9));
            }
        }
    }

    #[test]
    fn zero_jitter_follows_closed_form() {
        let cfg = SceneConfig {
            jitter_std: 0.0,
            ..SceneConfig::default()
        };
        for action in 0..8 {
            let v = generate_video(action, 5, &cfg).unwrap();
            let plan = plan_video(action, 5, &cfg).unwrap();
            assert_eq!(plan.length, v.len());
            for (i, f) in v.frames.iter().enumerate() {
                assert_eq!(&plan.pose_at(i, 1.0).unwrap(), f);
            }
        }
    }

    #[test]
    fn rejects_unknown_action() {
        let cfg = SceneConfig::default();
        assert!(generate_video(8, 0, &cfg).is_err());
    }

    #[test]
    fn flip_swaps_hands() {
        let cfg = SceneConfig::default();
        let v = generate_video(6, 1, &cfg).unwrap();
        let f = horizontal_flip(&v);
        let l = v.frames[0].left.joints[0][0];
        assert_eq!(f.frames[0].right.joints[0][0], 1.0 - l);
        assert_eq!(horizontal_flip(&f), v);
        assert_eq!(f.action_id, v.action_id);
    }
}
