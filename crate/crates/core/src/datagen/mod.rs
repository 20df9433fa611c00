//! RGB-D samples, the synthetic scene/clip generator, and on-disk datasets.
//!
//! Rasters are stored channel-first: images as `(C, H, W)`, clips as
//! `(T, C, H, W)`. RGB values live in `[0, 1]`; depth is in meters.

mod dataset;
mod synth;

pub use dataset::{
    load_dataset, load_sample, write_dataset, DatasetManifest, SampleKind, SampleRecord,
    DEFAULT_DEPTH_MAX, DEFAULT_DEPTH_SCALE,
};
pub use synth::{
    motion_class, synth_clip, synth_scene, ClipParams, MotionDirection, ObjectShape, SceneObject,
    SceneParams, MAX_DEPTH, MIN_DEPTH, NUM_CATEGORIES, NUM_SEG_CLASSES,
};

use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};

/// A single RGB frame with its aligned depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbDepthSample {
    /// `(3, H, W)`, values in `[0, 1]`.
    pub rgb: Array3<f32>,
    /// `(1, H, W)`, meters.
    pub depth: Array3<f32>,
    pub label: Option<u32>,
    /// Per-pixel class map `(H, W)`; `0` is background.
    pub segmentation: Option<Array2<u8>>,
}

/// A clip of RGB frames with aligned depth maps.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    /// `(T, 3, H, W)`
    pub rgb: Array4<f32>,
    /// `(T, 1, H, W)`
    pub depth: Array4<f32>,
    pub label: Option<u32>,
}

/// Either kind of sample, as produced by [`load_sample`].
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Image(RgbDepthSample),
    Video(VideoSample),
}

impl RgbDepthSample {
    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        check_frame(self.rgb.view(), self.depth.view())?;
        if let Some(seg) = &self.segmentation {
            if seg.shape() != [self.height(), self.width()] {
                return Err(Error::Dimension(format!(
                    "segmentation map {:?} does not match frame {}x{}",
                    seg.shape(),
                    self.height(),
                    self.width()
                )));
            }
        }
        Ok(())
    }
}

impl VideoSample {
    pub fn frames(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[3]
    }

    /// Checks per-frame constraints and that `T` divides by `tubelet`.
    pub fn validate(&self, tubelet: usize) -> Result<()> {
        let t = self.frames();
        if self.depth.shape()[0] != t {
            return Err(Error::Dimension(format!(
                "rgb has {t} frames but depth has {}",
                self.depth.shape()[0]
            )));
        }
        if tubelet == 0 || t == 0 || t % tubelet != 0 {
            return Err(Error::Dimension(format!(
                "clip length {t} is not divisible by tubelet size {tubelet}"
            )));
        }
        for (rgb, depth) in self.rgb.outer_iter().zip(self.depth.outer_iter()) {
            check_frame(rgb, depth)?;
        }
        Ok(())
    }

    /// Frame `i` as a standalone sample.
    pub fn frame(&self, i: usize) -> RgbDepthSample {
        RgbDepthSample {
            rgb: self.rgb.index_axis(Axis(0), i).to_owned(),
            depth: self.depth.index_axis(Axis(0), i).to_owned(),
            label: self.label,
            segmentation: None,
        }
    }
}

fn check_frame(rgb: ndarray::ArrayView3<f32>, depth: ndarray::ArrayView3<f32>) -> Result<()> {
    let (rs, ds) = (rgb.shape(), depth.shape());
    if rs[0] != 3 || ds[0] != 1 {
        return Err(Error::Dimension(format!(
            "expected 3 rgb channels and 1 depth channel, got {} and {}",
            rs[0], ds[0]
        )));
    }
    if rs[1..] != ds[1..] {
        return Err(Error::Dimension(format!(
            "rgb {}x{} and depth {}x{} differ",
            rs[1], rs[2], ds[1], ds[2]
        )));
    }
    if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Validation("rgb values must lie in [0, 1]".into()));
    }
    if depth.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(
            "depth values must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// Per-sample min-max statistics used to bring depth into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthNorm {
    pub min: f32,
    pub range: f32,
}

impl DepthNorm {
    const RANGE_FLOOR: f32 = 1e-6;

    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f32>) -> Self {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { min: 0.0, range: 1.0 };
        }
        Self {
            min: lo,
            range: (hi - lo).max(Self::RANGE_FLOOR),
        }
    }

    pub fn apply(&self, v: f32) -> f32 {
        (v - self.min) / self.range
    }

    pub fn invert(&self, v: f32) -> f32 {
        v * self.range + self.min
    }
}

/// Min-max normalizes a depth raster of any rank, returning the stats used.
pub fn normalize_depth<D: ndarray::Dimension>(
    depth: &ndarray::Array<f32, D>,
) -> (ndarray::Array<f32, D>, DepthNorm) {
    let norm = DepthNorm::fit(depth.iter());
    (depth.mapv(|v| norm.apply(v)), norm)
}
