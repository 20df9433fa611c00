//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.json
//! root/rgb/<id>.png            8-bit RGB
//! root/depth/<id>.png          16-bit gray, millimeters
//! root/seg/<id>.png            8-bit class map (optional)
//! root/rgb/<id>/<frame:05>.png video frames, same for depth
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::{RgbDepthSample, Sample, VideoSample};
use crate::error::{Error, Result};

/// Stored depth units per meter.
pub const DEFAULT_DEPTH_SCALE: f32 = 1000.0;
pub const DEFAULT_DEPTH_MAX: f32 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Image,
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Relative to the dataset root. A directory of frames for video.
    pub rgb: String,
    pub depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub kind: SampleKind,
    /// Stored depth value per meter (1000 for millimeters).
    #[serde(default = "default_scale")]
    pub depth_scale: f32,
    /// Depth values above this (meters) are clamped.
    #[serde(default = "default_max")]
    pub depth_max: f32,
    pub records: Vec<SampleRecord>,
}

fn default_scale() -> f32 {
    DEFAULT_DEPTH_SCALE
}

fn default_max() -> f32 {
    DEFAULT_DEPTH_MAX
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn frame_path(&self, rel: &str, frame: usize) -> PathBuf {
        self.root.join(rel).join(format!("{frame:05}.png"))
    }

    /// Stored 16-bit value to meters.
    pub fn decode_depth(&self, raw: u16) -> f32 {
        (raw as f32 / self.depth_scale).min(self.depth_max)
    }
}

/// Parses a manifest and checks that every record's rasters exist and agree
/// in resolution.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
    manifest.root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    if !(manifest.depth_scale > 0.0) || !(manifest.depth_max > 0.0) {
        return Err(Error::Validation(format!(
            "{}: depth_scale and depth_max must be positive",
            manifest_path.display()
        )));
    }
    for record in &manifest.records {
        validate_record(&manifest, record)?;
    }
    Ok(manifest)
}

fn dims_of(path: &Path) -> Result<(u32, u32)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn validate_record(manifest: &DatasetManifest, record: &SampleRecord) -> Result<()> {
    let mismatch = |a: &Path, da: (u32, u32), b: &Path, db: (u32, u32)| {
        Error::Validation(format!(
            "record '{}': {} is {}x{} but {} is {}x{}",
            record.id,
            a.display(),
            da.0,
            da.1,
            b.display(),
            db.0,
            db.1
        ))
    };
    let mut pairs = Vec::new();
    match manifest.kind {
        SampleKind::Image => {
            pairs.push((manifest.path(&record.rgb), manifest.path(&record.depth)));
        }
        SampleKind::Video => {
            let frames = record.frames.ok_or_else(|| {
                Error::Validation(format!("record '{}': video record lacks 'frames'", record.id))
            })?;
            for f in 0..frames {
                pairs.push((
                    manifest.frame_path(&record.rgb, f),
                    manifest.frame_path(&record.depth, f),
                ));
            }
        }
    }
    let mut reference: Option<(PathBuf, (u32, u32))> = None;
    for (rgb, depth) in pairs {
        let (dr, dd) = (dims_of(&rgb)?, dims_of(&depth)?);
        if dr != dd {
            return Err(mismatch(&rgb, dr, &depth, dd));
        }
        match &reference {
            Some((p, d)) if *d != dr => return Err(mismatch(p, *d, &rgb, dr)),
            None => reference = Some((rgb, dr)),
            _ => {}
        }
    }
    if let (Some(seg), Some((p, d))) = (&record.segmentation, &reference) {
        let seg = manifest.path(seg);
        let ds = dims_of(&seg)?;
        if ds != *d {
            return Err(mismatch(p, *d, &seg, ds));
        }
    }
    Ok(())
}

fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn read_depth(manifest: &DatasetManifest, path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::Validation(format!(
                "{}: depth must be a 16-bit single-channel raster, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((1, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[0, y as usize, x as usize]] = manifest.decode_depth(px[0]);
    }
    Ok(out)
}

fn read_seg(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

/// Loads record `index`. Depth is converted to meters and clamped.
pub fn load_sample(manifest: &DatasetManifest, index: usize) -> Result<Sample> {
    let record = manifest.records.get(index).ok_or_else(|| {
        Error::Validation(format!(
            "sample index {index} out of range for {} records",
            manifest.len()
        ))
    })?;
    match manifest.kind {
        SampleKind::Image => {
            let sample = RgbDepthSample {
                rgb: read_rgb(&manifest.path(&record.rgb))?,
                depth: read_depth(manifest, &manifest.path(&record.depth))?,
                label: record.label,
                segmentation: record
                    .segmentation
                    .as_deref()
                    .map(|s| read_seg(&manifest.path(s)))
                    .transpose()?,
            };
            sample
                .validate()
                .map_err(|e| Error::Validation(format!("record '{}': {e}", record.id)))?;
            Ok(Sample::Image(sample))
        }
        SampleKind::Video => {
            let frames = record.frames.unwrap_or(0);
            let mut rgb_frames = Vec::with_capacity(frames);
            let mut depth_frames = Vec::with_capacity(frames);
            for f in 0..frames {
                rgb_frames.push(read_rgb(&manifest.frame_path(&record.rgb, f))?);
                depth_frames.push(read_depth(manifest, &manifest.frame_path(&record.depth, f))?);
            }
            let stack = |v: &[Array3<f32>]| -> Result<Array4<f32>> {
                let views: Vec<_> = v.iter().map(|a| a.view()).collect();
                ndarray::stack(Axis(0), &views).map_err(|e| {
                    Error::Validation(format!("record '{}': {e}", record.id))
                })
            };
            Ok(Sample::Video(VideoSample {
                rgb: stack(&rgb_frames)?,
                depth: stack(&depth_frames)?,
                label: record.label,
            }))
        }
    }
}

fn write_rgb(path: &Path, rgb: ndarray::ArrayView3<f32>) -> Result<()> {
    let (_, h, w) = rgb.dim();
    let img = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| (rgb[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn write_depth(path: &Path, depth: ndarray::ArrayView3<f32>, scale: f32) -> Result<()> {
    let (_, h, w) = depth.dim();
    let img = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        let v = (depth[[0, y as usize, x as usize]] * scale).round();
        Luma([v.clamp(0.0, u16::MAX as f32) as u16])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn write_seg(path: &Path, seg: &Array2<u8>) -> Result<()> {
    let (h, w) = seg.dim();
    let img = ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([seg[[y as usize, x as usize]]])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes samples under `root` in the standard layout and returns the manifest
/// (also saved as `root/manifest.json`).
pub fn write_dataset(root: impl AsRef<Path>, samples: &[Sample]) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let kind = match samples.first() {
        Some(Sample::Video(_)) => SampleKind::Video,
        _ => SampleKind::Image,
    };
    mkdir(&root.join("rgb"))?;
    mkdir(&root.join("depth"))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let id = format!("{i:06}");
        let record = match (kind, sample) {
            (SampleKind::Image, Sample::Image(s)) => {
                let rgb = format!("rgb/{id}.png");
                let depth = format!("depth/{id}.png");
                write_rgb(&root.join(&rgb), s.rgb.view())?;
                write_depth(&root.join(&depth), s.depth.view(), DEFAULT_DEPTH_SCALE)?;
                let segmentation = match &s.segmentation {
                    Some(seg) => {
                        mkdir(&root.join("seg"))?;
                        let rel = format!("seg/{id}.png");
                        write_seg(&root.join(&rel), seg)?;
                        Some(rel)
                    }
                    None => None,
                };
                SampleRecord {
                    id,
                    rgb,
                    depth,
                    label: s.label,
                    segmentation,
                    frames: None,
                }
            }
            (SampleKind::Video, Sample::Video(v)) => {
                let rgb = format!("rgb/{id}");
                let depth = format!("depth/{id}");
                mkdir(&root.join(&rgb))?;
                mkdir(&root.join(&depth))?;
                for f in 0..v.frames() {
                    let name = format!("{f:05}.png");
                    write_rgb(&root.join(&rgb).join(&name), v.rgb.index_axis(Axis(0), f))?;
                    write_depth(
                        &root.join(&depth).join(&name),
                        v.depth.index_axis(Axis(0), f),
                        DEFAULT_DEPTH_SCALE,
                    )?;
                }
                SampleRecord {
                    id,
                    rgb,
                    depth,
                    label: v.label,
                    segmentation: None,
                    frames: Some(v.frames()),
                }
            }
            _ => {
                return Err(Error::Validation(format!(
                    "sample {i} kind differs from the first sample"
                )))
            }
        };
        records.push(record);
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        kind,
        depth_scale: DEFAULT_DEPTH_SCALE,
        depth_max: DEFAULT_DEPTH_MAX,
        records,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
