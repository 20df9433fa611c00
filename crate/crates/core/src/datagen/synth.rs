//! Procedural RGB-D scenes: a floor-like background whose color and depth
//! both vary with image row, plus 2-6 flat objects at distinct depths.
//! Object boundaries are edges in both modalities at once.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RgbDepthSample, VideoSample};
use crate::error::{Error, Result};
use crate::tokenizer::DEFAULT_PATCH_SIZE;

pub const MIN_DEPTH: f32 = 0.5;
pub const MAX_DEPTH: f32 = 8.0;

/// Object categories; each has a characteristic hue and shape.
pub const NUM_CATEGORIES: usize = 4;
/// Segmentation classes: background plus one per category.
pub const NUM_SEG_CLASSES: usize = NUM_CATEGORIES + 1;

const MIN_SIDE: usize = 32;

const CATEGORY_COLORS: [[f32; 3]; NUM_CATEGORIES] = [
    [0.85, 0.20, 0.15],
    [0.20, 0.75, 0.25],
    [0.15, 0.30, 0.90],
    [0.90, 0.80, 0.15],
];

const CATEGORY_SHAPES: [ObjectShape; NUM_CATEGORIES] = [
    ObjectShape::Rectangle,
    ObjectShape::Ellipse,
    ObjectShape::Rectangle,
    ObjectShape::Ellipse,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectShape {
    Rectangle,
    Ellipse,
}

/// One flat object. Coordinates are in pixels at time 0, the clip midpoint
/// (`x` right, `y` down).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ObjectShape,
    pub category: u8,
    pub color: [f32; 3],
    pub center: [f64; 2],
    pub half_extent: [f64; 2],
    pub depth: f32,
    /// Pixels per frame.
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub top_color: [f32; 3],
    pub bottom_color: [f32; 3],
    /// Background depth at the top and bottom rows.
    pub far_depth: f32,
    pub near_depth: f32,
    pub objects: Vec<SceneObject>,
}

/// The eight compass directions used as motion labels. Screen "north" is up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u32)]
pub enum MotionDirection {
    East = 0,
    NorthEast = 1,
    North = 2,
    NorthWest = 3,
    West = 4,
    SouthWest = 5,
    South = 6,
    SouthEast = 7,
}

impl MotionDirection {
    pub const COUNT: usize = 8;

    pub fn from_class(class: u32) -> Option<Self> {
        use MotionDirection::*;
        [East, NorthEast, North, NorthWest, West, SouthWest, South, SouthEast]
            .get(class as usize)
            .copied()
    }

    pub fn class(self) -> u32 {
        self as u32
    }
}

/// Quantizes a screen-space displacement (`y` down) into a compass class.
pub fn motion_class(dx: f64, dy: f64) -> MotionDirection {
    let angle = (-dy).atan2(dx);
    let sector = (angle / (PI / 4.0)).round() as i64;
    MotionDirection::from_class(sector.rem_euclid(8) as u32).expect("sector in 0..8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub scene: SceneParams,
    pub frames: usize,
}

impl ClipParams {
    /// Mean per-object displacement between the first and last frame.
    pub fn mean_displacement(&self) -> [f64; 2] {
        let n = self.scene.objects.len().max(1) as f64;
        let span = self.frames.saturating_sub(1) as f64;
        let (sx, sy) = self
            .scene
            .objects
            .iter()
            .fold((0.0, 0.0), |(x, y), o| (x + o.velocity[0], y + o.velocity[1]));
        [sx * span / n, sy * span / n]
    }

    pub fn label(&self) -> MotionDirection {
        let [dx, dy] = self.mean_displacement();
        motion_class(dx, dy)
    }

    pub fn render(&self) -> VideoSample {
        let (h, w) = (self.scene.height, self.scene.width);
        let mut rgb = Array4::zeros((self.frames, 3, h, w));
        let mut depth = Array4::zeros((self.frames, 1, h, w));
        let mid = (self.frames as f64 - 1.0) / 2.0;
        for f in 0..self.frames {
            let frame = self.scene.render_at(f as f64 - mid);
            rgb.index_axis_mut(Axis(0), f).assign(&frame.rgb);
            depth.index_axis_mut(Axis(0), f).assign(&frame.depth);
        }
        VideoSample {
            rgb,
            depth,
            label: Some(self.label().class()),
        }
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Dimension(format!(
            "synthetic frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
        )));
    }
    if h % DEFAULT_PATCH_SIZE != 0 || w % DEFAULT_PATCH_SIZE != 0 {
        return Err(Error::Dimension(format!(
            "synthetic frame {h}x{w} is not divisible by patch size {DEFAULT_PATCH_SIZE}"
        )));
    }
    Ok(())
}

impl SceneParams {
    /// Draws scene parameters from `rng`. Objects are static.
    pub fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let jitter = |rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32| {
            base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
        };
        let top_color = jitter(rng, [0.70, 0.70, 0.72], 0.15);
        let bottom_color = jitter(rng, [0.35, 0.32, 0.30], 0.15);
        let far_depth = rng.random_range(6.0..MAX_DEPTH);
        let near_depth = rng.random_range(2.0..3.0);

        let count = rng.random_range(2..=6usize);
        // Distinct depths: one per equal-width slot in [0.6, 5.0).
        let slot = (5.0 - 0.6) / count as f32;
        let mut slots: Vec<usize> = (0..count).collect();
        for i in (1..count).rev() {
            slots.swap(i, rng.random_range(0..=i));
        }
        let (hf, wf) = (h as f64, w as f64);
        let objects = slots
            .into_iter()
            .map(|s| {
                let category = rng.random_range(0..NUM_CATEGORIES);
                let depth = 0.6 + slot * (s as f32 + rng.random_range(0.2..0.8));
                SceneObject {
                    shape: CATEGORY_SHAPES[category],
                    category: category as u8,
                    color: jitter(rng, CATEGORY_COLORS[category], 0.08),
                    center: [
                        rng.random_range(0.15 * wf..0.85 * wf),
                        rng.random_range(0.15 * hf..0.85 * hf),
                    ],
                    half_extent: [
                        rng.random_range(0.08 * wf..0.22 * wf),
                        rng.random_range(0.08 * hf..0.22 * hf),
                    ],
                    depth,
                    velocity: [0.0, 0.0],
                }
            })
            .collect();
        Self {
            height: h,
            width: w,
            top_color,
            bottom_color,
            far_depth,
            near_depth,
            objects,
        }
    }

    pub fn render(&self) -> RgbDepthSample {
        self.render_at(0.0)
    }

    /// Renders with every object displaced by `time * velocity`.
    pub fn render_at(&self, time: f64) -> RgbDepthSample {
        let (h, w) = (self.height, self.width);
        let mut rgb = Array3::zeros((3, h, w));
        let mut depth = Array3::zeros((1, h, w));
        let mut seg = Array2::zeros((h, w));
        for y in 0..h {
            let v = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.0 };
            let d = self.far_depth + (self.near_depth - self.far_depth) * v;
            for x in 0..w {
                for c in 0..3 {
                    rgb[[c, y, x]] = self.top_color[c] + (self.bottom_color[c] - self.top_color[c]) * v;
                }
                depth[[0, y, x]] = d;
            }
        }
        // Painter's order: far objects first.
        let mut order: Vec<&SceneObject> = self.objects.iter().collect();
        order.sort_by(|a, b| b.depth.total_cmp(&a.depth));
        for obj in order {
            let cx = obj.center[0] + obj.velocity[0] * time;
            let cy = obj.center[1] + obj.velocity[1] * time;
            let [rx, ry] = obj.half_extent;
            let x0 = ((cx - rx).floor().max(0.0)) as usize;
            let y0 = ((cy - ry).floor().max(0.0)) as usize;
            let x1 = ((cx + rx).ceil().max(0.0) as usize).min(w);
            let y1 = ((cy + ry).ceil().max(0.0) as usize).min(h);
            for y in y0..y1 {
                let py = y as f64 + 0.5;
                for x in x0..x1 {
                    let px = x as f64 + 0.5;
                    let inside = match obj.shape {
                        ObjectShape::Rectangle => (px - cx).abs() <= rx && (py - cy).abs() <= ry,
                        ObjectShape::Ellipse => {
                            let (u, v) = ((px - cx) / rx, (py - cy) / ry);
                            u * u + v * v <= 1.0
                        }
                    };
                    if inside {
                        for c in 0..3 {
                            rgb[[c, y, x]] = obj.color[c];
                        }
                        depth[[0, y, x]] = obj.depth;
                        seg[[y, x]] = obj.category + 1;
                    }
                }
            }
        }
        RgbDepthSample {
            rgb,
            depth,
            label: None,
            segmentation: Some(seg),
        }
    }
}

/// Deterministic synthetic RGB-D frame.
pub fn synth_scene(seed: u64, h: usize, w: usize) -> Result<RgbDepthSample> {
    check_dims(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(SceneParams::sample(&mut rng, h, w).render())
}

impl ClipParams {
    /// Draws a scene whose objects share a dominant heading (one of the eight
    /// compass directions, with small per-object deviations).
    pub fn sample(seed: u64, t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || t % 2 != 0 {
            return Err(Error::Dimension(format!(
                "clip length must be a positive even number, got {t}"
            )));
        }
        check_dims(h, w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scene = SceneParams::sample(&mut rng, h, w);
        let class = rng.random_range(0..MotionDirection::COUNT);
        let heading = class as f64 * PI / 4.0 + rng.random_range(-0.15..0.15);
        let scale = h.min(w) as f64 / 64.0;
        for obj in &mut scene.objects {
            let theta = heading + rng.random_range(-0.2..0.2);
            let speed = scale * rng.random_range(3.0..5.0);
            // y points down on screen
            obj.velocity = [speed * theta.cos(), -speed * theta.sin()];
        }
        Ok(Self { scene, frames: t })
    }
}

/// Deterministic synthetic clip labelled with its dominant motion direction.
pub fn synth_clip(seed: u64, t: usize, h: usize, w: usize) -> Result<VideoSample> {
    Ok(ClipParams::sample(seed, t, h, w)?.render())
}
