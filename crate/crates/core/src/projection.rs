//! Depth images from the point-cloud map: pinhole projection with a one-pixel
//! z-buffer, back-projection, voxel downsampling and overlay rendering.

use std::collections::BTreeMap;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

pub mod blob;

/// World-frame map points with optional per-point colors.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudMap {
    points: Vec<[f32; 3]>,
    colors: Option<Vec<[u8; 3]>>,
}

impl PointCloudMap {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        Self::build(points, None)
    }

    pub fn with_colors(points: Vec<[f32; 3]>, colors: Vec<[u8; 3]>) -> Result<Self> {
        if colors.len() != points.len() {
            return Err(Error::MapFormat(format!(
                "{} colors for {} points",
                colors.len(),
                points.len()
            )));
        }
        Self::build(points, Some(colors))
    }

    fn build(points: Vec<[f32; 3]>, colors: Option<Vec<[u8; 3]>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::MapFormat("map has no points".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::MapFormat(format!("point {i} is not finite")));
        }
        Ok(Self { points, colors })
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter_f64(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.points
            .iter()
            .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64))
    }
}

/// Near/far depth limits in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clips {
    pub near: f64,
    pub far: f64,
}

impl Default for Clips {
    fn default() -> Self {
        Self {
            near: 0.5,
            far: 100.0,
        }
    }
}

impl Clips {
    pub fn validate(&self) -> Result<()> {
        if self.near > 0.0 && self.near < self.far && self.far.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("bad clip range {self:?}")))
        }
    }
}

/// A projected map point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelHit {
    pub u: usize,
    pub v: usize,
    pub depth: f64,
}

/// Projects a world point into the image of a camera at `pose`. Points
/// outside the clip range or the image bounds yield `None`.
pub fn project_point(x: &Vector3<f64>, pose: &Pose, k: &Intrinsics, clips: Clips) -> Option<PixelHit> {
    project_camera_point(&pose.apply(x), k, clips)
}

fn project_camera_point(c: &Vector3<f64>, k: &Intrinsics, clips: Clips) -> Option<PixelHit> {
    let z = c.z;
    if !(z >= clips.near && z <= clips.far) {
        return None;
    }
    let u = k.fx * c.x / z + k.cx;
    let v = k.fy * c.y / z + k.cy;
    if !(u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64) {
        return None;
    }
    Some(PixelHit {
        u: u.floor() as usize,
        v: v.floor() as usize,
        depth: z,
    })
}

/// Single-channel metric depth image; `0.0` marks pixels no point hits.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    /// Wraps row-major values; each must be finite and non-negative.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DepthImage(format!(
                "{} values for a {width}×{height} image",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::DepthImage(format!("value {bad} is not a finite depth")));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.values[v * self.width + u]
    }

    /// Row-major values.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// Exports as a 16-bit PNG holding millimeters (0 = empty).
    pub fn save_png_mm(&self, path: &Path) -> Result<()> {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(
            self.width as u32,
            self.height as u32,
            |u, v| {
                let d = self.get(u as usize, v as usize);
                let mm = if d > 0.0 {
                    (d as f64 * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
                } else {
                    0
                };
                Luma([mm])
            },
        );
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Renders the z-buffered depth image of `points` (world frame) as seen from
/// `pose`. At equal depth the earliest point wins.
pub fn render_depth_points<I>(points: I, pose: &Pose, k: &Intrinsics, clips: Clips) -> DepthImage
where
    I: IntoIterator<Item = Vector3<f64>>,
{
    let mut zbuf = vec![f64::INFINITY; k.width * k.height];
    for x in points {
        if let Some(hit) = project_point(&x, pose, k, clips) {
            let slot = &mut zbuf[hit.v * k.width + hit.u];
            if hit.depth < *slot {
                *slot = hit.depth;
            }
        }
    }
    DepthImage {
        width: k.width,
        height: k.height,
        values: zbuf
            .into_iter()
            .map(|z| if z.is_finite() { z as f32 } else { 0.0 })
            .collect(),
    }
}

pub fn render_depth(map: &PointCloudMap, pose: &Pose, k: &Intrinsics, clips: Clips) -> DepthImage {
    render_depth_points(map.iter_f64(), pose, k, clips)
}

/// World point seen at the center of pixel `(u, v)` at the given depth.
pub fn backproject_pixel(u: usize, v: usize, depth: f64, pose: &Pose, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    let x = (u as f64 + 0.5 - k.cx) / k.fx * depth;
    let y = (v as f64 + 0.5 - k.cy) / k.fy * depth;
    Ok(pose.transform_point(&Vector3::new(x, y, depth)))
}

type VoxelKey = (i64, i64, i64);

pub(crate) fn voxel_key(p: &[f32; 3], voxel: f64) -> VoxelKey {
    (
        (p[0] as f64 / voxel).floor() as i64,
        (p[1] as f64 / voxel).floor() as i64,
        (p[2] as f64 / voxel).floor() as i64,
    )
}

#[derive(Default)]
struct VoxelAcc {
    sum: [f64; 3],
    rgb: [u64; 3],
    count: u64,
}

/// Replaces the points of every occupied voxel (origin-anchored grid) by
/// their centroid. Output is ordered by voxel index.
pub fn voxel_downsample(map: &PointCloudMap, voxel: f64) -> Result<PointCloudMap> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::MapFormat(format!("voxel size must be > 0, got {voxel}")));
    }
    let mut cells: BTreeMap<VoxelKey, VoxelAcc> = BTreeMap::new();
    for (i, p) in map.points.iter().enumerate() {
        let acc = cells.entry(voxel_key(p, voxel)).or_default();
        for a in 0..3 {
            acc.sum[a] += p[a] as f64;
        }
        if let Some(colors) = &map.colors {
            for a in 0..3 {
                acc.rgb[a] += colors[i][a] as u64;
            }
        }
        acc.count += 1;
    }
    let n = cells.len();
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(if map.colors.is_some() { n } else { 0 });
    for acc in cells.values() {
        let c = acc.count as f64;
        points.push(acc.sum.map(|s| (s / c) as f32));
        if map.colors.is_some() {
            colors.push(acc.rgb.map(|s| ((s as f64 / c).round()) as u8));
        }
    }
    match map.colors {
        Some(_) => PointCloudMap::with_colors(points, colors),
        None => PointCloudMap::new(points),
    }
}

/// Maps a depth to a blue (far) to red (near) color, linear in inverse depth.
pub fn depth_color(depth: f64, clips: Clips) -> [u8; 3] {
    let inv = |z: f64| 1.0 / z;
    let t = ((inv(depth) - inv(clips.far)) / (inv(clips.near) - inv(clips.far))).clamp(0.0, 1.0);
    // inverse-depth emphasis: nearby structure spans most of the ramp
    let t = t.sqrt();
    let ramp = |x: f64| (255.0 * x.clamp(0.0, 1.0)).round() as u8;
    [
        ramp(1.5 - (4.0 * t - 3.0).abs()),
        ramp(1.5 - (4.0 * t - 2.0).abs()),
        ramp(1.5 - (4.0 * t - 1.0).abs()),
    ]
}

/// Draws the map points visible from `pose` on top of `color`, one pixel per
/// z-buffered point, colored by depth.
pub fn render_overlay(color: &RgbImage, map: &PointCloudMap, pose: &Pose, k: &Intrinsics, clips: Clips) -> RgbImage {
    let mut out = color.clone();
    if map.is_empty() {
        return out;
    }
    let depth = render_depth(map, pose, k, clips);
    for v in 0..depth.height.min(out.height() as usize) {
        for u in 0..depth.width.min(out.width() as usize) {
            let d = depth.get(u, v);
            if d > 0.0 {
                out.put_pixel(u as u32, v as u32, Rgb(depth_color(d as f64, clips)));
            }
        }
    }
    out
}
