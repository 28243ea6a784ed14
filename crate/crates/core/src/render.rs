//! Keypoint-splat renderer producing the estimator's observation grids.
//!
//! Pixel `(row, col)` has its centre at `x = (col + 0.5) / W`,
//! `y = (row + 0.5) / H`, so mirroring the grid left-right is exactly the
//! render of the mirrored scene. Each point splats an isotropic Gaussian of
//! peak `0.5 + 0.5 z`; overlapping splats combine by maximum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{FramePose, Point};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_px: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            channels: 3,
            height: 48,
            width: 48,
            sigma_px: 1.5,
        }
    }
}

/// `channels × height × width` grid, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ObservationGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ObservationGrid {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} grid with {} values",
                data.len()
            )));
        }
        Ok(ObservationGrid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    fn at_mut(&mut self, c: usize, row: usize, col: usize) -> &mut f64 {
        &mut self.data[(c * self.height + row) * self.width + col]
    }

    /// Peak location `(row, col)` of one channel; ties resolve to the first
    /// in row-major order.
    pub fn argmax(&self, c: usize) -> (usize, usize) {
        let plane = &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
        let mut best = 0;
        for (i, v) in plane.iter().enumerate() {
            if *v > plane[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Left-right mirror with channels 0 and 1 exchanged.
    pub fn mirrored_swapped(&self) -> ObservationGrid {
        let mut out = ObservationGrid::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            let src = match c {
                0 if self.channels > 1 => 1,
                1 => 0,
                other => other,
            };
            for row in 0..self.height {
                for col in 0..self.width {
                    *out.at_mut(c, row, col) = self.at(src, row, self.width - 1 - col);
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &ObservationGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Splat radius in standard deviations; the tail beyond it is below 1e-13.
const RADIUS_SIGMAS: f64 = 8.0;

/// Renders arbitrary `(channel, point)` splats.
pub fn render_points(points: &[(usize, Point)], config: &RenderConfig) -> ObservationGrid {
    let (c, h, w) = (config.channels, config.height, config.width);
    let mut grid = ObservationGrid::zeros(c, h, w);
    let sigma = config.sigma_px;
    let radius = RADIUS_SIGMAS * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut gx = Vec::new();
    let mut gy = Vec::new();
    for &(channel, p) in points {
        if channel >= c {
            continue;
        }
        let u = p[0] * w as f64 - 0.5;
        let v = p[1] * h as f64 - 0.5;
        let intensity = 0.5 + 0.5 * p[2];
        let (c0, c1) = window(u, radius, w);
        let (r0, r1) = window(v, radius, h);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        gx.clear();
        gx.extend((c0..=c1).map(|i| (-(i as f64 - u).powi(2) * inv).exp()));
        gy.clear();
        gy.extend((r0..=r1).map(|j| (-(j as f64 - v).powi(2) * inv).exp()));
        for (jr, row) in (r0..=r1).enumerate() {
            let wy = intensity * gy[jr];
            for (ic, col) in (c0..=c1).enumerate() {
                let cell = grid.at_mut(channel, row, col);
                let val = wy * gx[ic];
                if val > *cell {
                    *cell = val;
                }
            }
        }
    }
    for v in grid.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    grid
}

fn window(center: f64, radius: f64, size: usize) -> (usize, usize) {
    let lo = (center - radius).ceil().max(0.0);
    let hi = (center + radius).floor().min(size as f64 - 1.0);
    if hi < lo {
        return (1, 0);
    }
    (lo as usize, hi as usize)
}

/// Channel 0 left hand, 1 right hand, 2 object.
pub fn render_frame(pose: &FramePose, config: &RenderConfig) -> ObservationGrid {
    let mut pts = Vec::with_capacity(63);
    pts.extend(pose.left.joints.iter().map(|p| (0, *p)));
    pts.extend(pose.right.joints.iter().map(|p| (1, *p)));
    pts.extend(pose.object.points.iter().map(|p| (2, *p)));
    render_points(&pts, config)
}

/// Non-overlapping `patch × patch` tiles, row-major, each flattened as
/// `(channel, row, col)`. Output is `n_patches × (C·patch²)`.
pub fn extract_patches(grid: &ObservationGrid, patch: usize) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = grid.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "grid {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let feat = c * patch * patch;
    let mut out = Vec::with_capacity(ph * pw * feat);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for r in 0..patch {
                    for col in 0..patch {
                        out.push(grid.at(ch, py * patch + r, px * patch + col));
                    }
                }
            }
        }
    }
    Ok((ph * pw, feat, out))
}
