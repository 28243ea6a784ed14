//! Scene entities: two 21-joint hands and a 21-point object box, all in
//! normalized scene coordinates `[0, 1]³` (x right, y down, z into the
//! scene).
//!
//! Hand joint order: 0 wrist; 1–4 thumb (CMC, MCP, IP, tip); 5–8 index,
//! 9–12 middle, 13–16 ring, 17–20 pinky (MCP, PIP, DIP, tip each).
//!
//! Object point order: 8 box corners, 12 edge midpoints, centroid. Corner
//! `i` has local sign `(bit0, bit1, bit2)` on `(x, y, z)`, set bit meaning
//! `+half_extent`. Edge midpoints follow [`BOX_EDGES`].
//!
//! Every generated coordinate is snapped to a multiple of 2⁻⁴⁰ so that
//! `x ↦ 1 − x` is exact in floating point and mirroring is an involution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINTS: usize = 21;
/// Coordinates per entity (21 points × 3).
pub const ENTITY_DIM: usize = JOINTS * 3;
/// Coordinates per frame (left, right, object).
pub const POSE_DIM: usize = ENTITY_DIM * 3;

pub type Point = [f64; 3];

/// Corner pairs whose midpoints are object points 8..20, in order.
pub const BOX_EDGES: [(usize, usize); 12] = [
    // along x
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    // along y
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    // along z
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

pub const CENTROID: usize = 20;

const SNAP: f64 = 1_099_511_627_776.0; // 2^40

pub(crate) fn snap(v: f64) -> f64 {
    (v * SNAP).round() / SNAP
}

fn snap_point(p: Point) -> Point {
    [snap(p[0]), snap(p[1]), snap(p[2])]
}

fn in_unit_cube(p: &Point) -> bool {
    p.iter().all(|v| (0.0..=1.0).contains(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn mirrored(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandKeypoints {
    pub side: Side,
    pub joints: [Point; JOINTS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectKeypoints {
    pub class_id: usize,
    pub points: [Point; JOINTS],
}

/// Both hands and the object for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePose {
    pub left: HandKeypoints,
    pub right: HandKeypoints,
    pub object: ObjectKeypoints,
}

fn flatten(points: &[Point; JOINTS], out: &mut Vec<f64>) {
    for p in points {
        out.extend_from_slice(p);
    }
}

fn unflatten(values: &[f64]) -> [Point; JOINTS] {
    let mut pts = [[0.0; 3]; JOINTS];
    for (i, p) in pts.iter_mut().enumerate() {
        p.copy_from_slice(&values[i * 3..i * 3 + 3]);
    }
    pts
}

impl FramePose {
    /// `[left 63 | right 63 | object 63]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(POSE_DIM);
        flatten(&self.left.joints, &mut out);
        flatten(&self.right.joints, &mut out);
        flatten(&self.object.points, &mut out);
        out
    }

    pub fn from_flat(values: &[f64], object_class: usize) -> Result<Self> {
        if values.len() != POSE_DIM {
            return Err(Error::Shape(format!(
                "pose needs {POSE_DIM} values, got {}",
                values.len()
            )));
        }
        Ok(FramePose {
            left: HandKeypoints {
                side: Side::Left,
                joints: unflatten(&values[..ENTITY_DIM]),
            },
            right: HandKeypoints {
                side: Side::Right,
                joints: unflatten(&values[ENTITY_DIM..2 * ENTITY_DIM]),
            },
            object: ObjectKeypoints {
                class_id: object_class,
                points: unflatten(&values[2 * ENTITY_DIM..]),
            },
        })
    }

    /// Mirror `x ↦ 1 − x`; the left and right hands exchange roles.
    pub fn mirrored(&self) -> FramePose {
        let mirror = |pts: &[Point; JOINTS]| {
            let mut out = *pts;
            for p in out.iter_mut() {
                p[0] = 1.0 - p[0];
            }
            out
        };
        FramePose {
            left: HandKeypoints {
                side: Side::Left,
                joints: mirror(&self.right.joints),
            },
            right: HandKeypoints {
                side: Side::Right,
                joints: mirror(&self.left.joints),
            },
            object: ObjectKeypoints {
                class_id: self.object.class_id,
                points: mirror(&self.object.points),
            },
        }
    }

    pub fn all_points(&self) -> impl Iterator<Item = &Point> {
        self.left
            .joints
            .iter()
            .chain(&self.right.joints)
            .chain(&self.object.points)
    }

    pub fn in_bounds(&self) -> bool {
        self.all_points().all(in_unit_cube)
    }
}

/// Rotation applied as `Ry(yaw) · Rx(pitch) · Rz(roll)`.
pub fn rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&mat_mul(&ry, &rx), &rz)
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub(crate) fn apply(r: &[[f64; 3]; 3], v: Point) -> Point {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

fn mean(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let mut m = [0.0; 3];
    for p in points {
        for k in 0..3 {
            m[k] += p[k];
        }
    }
    m.map(|v| v / n)
}

/// Box keypoints for a rotated, translated cuboid.
pub fn make_object_keypoints(
    center: Point,
    half_extents: [f64; 3],
    yaw_pitch_roll: [f64; 3],
    class_id: usize,
) -> Result<ObjectKeypoints> {
    if half_extents.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "half extents must be positive, got {half_extents:?}"
        )));
    }
    let r = rotation(yaw_pitch_roll[0], yaw_pitch_roll[1], yaw_pitch_roll[2]);
    let mut points = [[0.0; 3]; JOINTS];
    for (i, corner) in points.iter_mut().take(8).enumerate() {
        let local = [
            if i & 1 != 0 { half_extents[0] } else { -half_extents[0] },
            if i & 2 != 0 { half_extents[1] } else { -half_extents[1] },
            if i & 4 != 0 { half_extents[2] } else { -half_extents[2] },
        ];
        let rotated = apply(&r, local);
        *corner = [
            center[0] + rotated[0],
            center[1] + rotated[1],
            center[2] + rotated[2],
        ];
    }
    for (e, &(a, b)) in BOX_EDGES.iter().enumerate() {
        points[8 + e] = mean(&[points[a], points[b]]);
    }
    points[CENTROID] = mean(&points[..8]);
    for p in points.iter_mut() {
        *p = snap_point(*p);
    }
    if let Some(p) = points.iter().find(|p| !in_unit_cube(p)) {
        return Err(Error::OutOfBounds(format!(
            "object keypoint {p:?} leaves the unit cube"
        )));
    }
    Ok(ObjectKeypoints { class_id, points })
}

/// Largest deviation from the centroid and midpoint identities.
pub fn object_invariant_error(obj: &ObjectKeypoints) -> f64 {
    let mut worst: f64 = 0.0;
    let c = mean(&obj.points[..8]);
    for k in 0..3 {
        worst = worst.max((obj.points[CENTROID][k] - c[k]).abs());
    }
    for (e, &(a, b)) in BOX_EDGES.iter().enumerate() {
        let m = mean(&[obj.points[a], obj.points[b]]);
        for k in 0..3 {
            worst = worst.max((obj.points[8 + e][k] - m[k]).abs());
        }
    }
    worst
}

/// (lateral, up) palm offset of each finger base, thumb first, for a right
/// hand. Lateral is negated for the left hand.
const FINGER_BASES: [(f64, f64); 5] = [
    (-0.030, 0.025),
    (-0.025, 0.080),
    (-0.008, 0.085),
    (0.010, 0.080),
    (0.027, 0.070),
];

const FINGER_SEGMENTS: [[f64; 3]; 5] = [
    [0.030, 0.025, 0.020],
    [0.035, 0.022, 0.018],
    [0.038, 0.024, 0.019],
    [0.035, 0.022, 0.018],
    [0.028, 0.018, 0.015],
];

/// 21 hand joints from a wrist position, an in-plane roll about the viewing
/// axis, and a finger curl in `[0, 1]`.
pub fn make_hand_keypoints(side: Side, wrist: Point, roll: f64, curl: f64) -> Result<HandKeypoints> {
    let mirror = match side {
        Side::Right => 1.0,
        Side::Left => -1.0,
    };
    // local frame: lateral → +x, up → −y (image up), depth → +z
    let r = rotation(0.0, 0.0, roll);
    let to_scene = |lateral: f64, up: f64, depth: f64| {
        let v = apply(&r, [mirror * lateral, -up, depth]);
        [wrist[0] + v[0], wrist[1] + v[1], wrist[2] + v[2]]
    };
    let mut joints = [[0.0; 3]; JOINTS];
    joints[0] = wrist;
    let bend = 0.9 * curl.clamp(0.0, 1.0);
    for (f, (&(bl, bu), segs)) in FINGER_BASES.iter().zip(&FINGER_SEGMENTS).enumerate() {
        // thumb points outward at 45°, the rest straight up
        let (dir_l, dir_u) = if f == 0 {
            (-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2)
        } else {
            (0.0, 1.0)
        };
        let (mut l, mut u, mut d) = (bl, bu, 0.0);
        joints[1 + f * 4] = to_scene(l, u, d);
        for (s, len) in segs.iter().enumerate() {
            let phi = bend * (s + 1) as f64;
            let planar = len * phi.cos();
            l += dir_l * planar;
            u += dir_u * planar;
            d += len * phi.sin();
            joints[1 + f * 4 + s + 1] = to_scene(l, u, d);
        }
    }
    for j in joints.iter_mut() {
        *j = snap_point(*j);
    }
    if let Some(p) = joints.iter().find(|p| !in_unit_cube(p)) {
        return Err(Error::OutOfBounds(format!(
            "hand keypoint {p:?} leaves the unit cube"
        )));
    }
    Ok(HandKeypoints { side, joints })
}
