//! Procedural static/dynamic benchmark scenes.
//!
//! A scene is a ground plane, an elliptical road loop and axis-aligned boxes
//! standing beside it. Dynamic obstacles (pedestrian- and vehicle-sized
//! boxes) move on the road. The map point cloud is sampled from static
//! surfaces only, so obstacles show up in color images but never in depth
//! images rendered from the map. A scene generated with `n_dynamic = 0` is
//! the static twin of the same seed: static geometry, palette, map and
//! trajectory do not depend on the obstacle count.

use std::f64::consts::TAU;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{format_pose_csv, parse_pose_csv, DatasetManifest, Recipe, Splits, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PerturbationSpec, Pose};
use crate::projection::{blob, Clips, PointCloudMap};

// RNG stream ids; each aspect of a scene draws from its own stream so that
// changing one count never shifts the others.
const STREAM_STATIC: u64 = 1;
const STREAM_OBSTACLES: u64 = 2;
const STREAM_PALETTE: u64 = 3;
const STREAM_TRAJECTORY: u64 = 4;
const STREAM_GROUND: u64 = 5;
const STREAM_FACES: u64 = 1 << 32;

pub const CAMERA_HEIGHT: f64 = 1.5;
pub const SKY_RGB: [u8; 3] = [150, 190, 235];

/// Axis-aligned colored box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxShape {
    pub center: Vector3<f64>,
    pub size: Vector3<f64>,
    pub rgb: [u8; 3],
}

impl BoxShape {
    pub fn min(&self) -> Vector3<f64> {
        self.center - self.size / 2.0
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center + self.size / 2.0
    }

    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] - margin && p[a] <= hi[a] + margin)
    }

    /// Slab test for the ray `o + t·d`. Returns the entry parameter and the
    /// entered face as `(axis, facing_negative)`; rays starting inside the
    /// box do not hit it.
    pub fn ray_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize, bool)> {
        let (lo, hi) = (self.min(), self.max());
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut face = (0, false);
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let t1 = (lo[a] - o[a]) / d[a];
            let t2 = (hi[a] - o[a]) / d[a];
            let (enter, exit) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if enter > t_near {
                t_near = enter;
                face = (a, d[a] > 0.0);
            }
            t_far = t_far.min(exit);
        }
        (t_near <= t_far && t_near > 0.0).then_some((t_near, face.0, face.1))
    }

    fn corners(&self) -> [Vector3<f64>; 8] {
        let (lo, hi) = (self.min(), self.max());
        std::array::from_fn(|i| {
            Vector3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            )
        })
    }
}

/// Back-and-forth motion between two ground points; `bulge` bends the
/// straight segment into a parabola (meters of lateral offset at midway).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Track {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub bulge: f64,
    /// Frames for a full there-and-back cycle.
    pub period: u32,
    pub phase: u32,
}

impl Track {
    /// Ground position at `frame`; defined for every frame index.
    pub fn position(&self, frame: usize) -> [f64; 2] {
        let period = self.period.max(2) as usize;
        let k = (frame + self.phase as usize) % period;
        let x = 2.0 * k as f64 / period as f64;
        let s = if x <= 1.0 { x } else { 2.0 - x };
        let (dx, dy) = (self.end[0] - self.start[0], self.end[1] - self.start[1]);
        let len = dx.hypot(dy).max(1e-12);
        let (nx, ny) = (-dy / len, dx / len);
        let lateral = 4.0 * self.bulge * s * (1.0 - s);
        [
            self.start[0] + dx * s + nx * lateral,
            self.start[1] + dy * s + ny * lateral,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub size: Vector3<f64>,
    pub rgb: [u8; 3],
    pub track: Track,
}

impl Obstacle {
    pub fn box_at(&self, frame: usize) -> BoxShape {
        let [x, y] = self.track.position(frame);
        BoxShape {
            center: Vector3::new(x, y, self.size.z / 2.0),
            size: self.size,
            rgb: self.rgb,
        }
    }
}

/// Elliptical road loop centered on the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Road {
    pub radius_x: f64,
    pub radius_y: f64,
    pub half_width: f64,
}

impl Road {
    pub fn point(&self, theta: f64) -> [f64; 2] {
        [self.radius_x * theta.cos(), self.radius_y * theta.sin()]
    }

    /// Derivative of [`Road::point`] with respect to `theta`.
    pub fn tangent(&self, theta: f64) -> [f64; 2] {
        [-self.radius_x * theta.sin(), self.radius_y * theta.cos()]
    }

    /// Unit normal pointing away from the loop center.
    pub fn outward(&self, theta: f64) -> [f64; 2] {
        let [tx, ty] = self.tangent(theta);
        let n = tx.hypot(ty);
        [ty / n, -tx / n]
    }

    /// Distance from a ground point to the road center line (sampled).
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        (0..720)
            .map(|i| {
                let q = self.point(i as f64 / 720.0 * TAU);
                (p[0] - q[0]).hypot(p[1] - q[1])
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub extent: f64,
    pub static_boxes: Vec<BoxShape>,
    pub obstacles: Vec<Obstacle>,
    /// Half side of the square ground plane at `z = 0`, if any.
    pub ground: Option<f64>,
    pub road: Road,
    pub ground_rgb: [u8; 3],
    pub sky_rgb: [u8; 3],
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn palette(seed: u64, n: usize, saturated: bool) -> Vec<[u8; 3]> {
    let mut rng = stream_rng(seed, STREAM_PALETTE + if saturated { 100 } else { 0 });
    (0..n)
        .map(|_| {
            let hue = rng.random::<f64>() * 6.0;
            let (lo, hi) = if saturated { (20.0, 250.0) } else { (70.0, 210.0) };
            let mix = |off: f64| {
                let x = ((hue + off) % 6.0 - 3.0).abs() - 1.0;
                (lo + (hi - lo) * x.clamp(0.0, 1.0)).round() as u8
            };
            [mix(0.0), mix(4.0), mix(2.0)]
        })
        .collect()
}

/// Generates the scene for `seed`. Static content depends only on `seed`,
/// `n_static` and `extent`.
pub fn generate_scene(seed: u64, n_static: usize, n_dynamic: usize, extent: f64) -> Result<Scene> {
    if n_static == 0 {
        return Err(Error::Generation("n_static must be at least 1".into()));
    }
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::Generation(format!("extent must be > 0, got {extent}")));
    }
    let road = Road {
        radius_x: 0.55 * extent,
        radius_y: 0.40 * extent,
        half_width: (0.08 * extent).clamp(1.0, 5.0),
    };
    let building_colors = palette(seed, 8, false);
    let obstacle_colors = palette(seed, 4, true);

    let mut rng = stream_rng(seed, STREAM_STATIC);
    let max_side = (extent / 4.0).min(8.0);
    let mut static_boxes = Vec::with_capacity(n_static);
    for i in 0..n_static {
        let mut placed = None;
        for _ in 0..500 {
            let size = Vector3::new(
                rng.random_range(0.25..=1.0) * max_side,
                rng.random_range(0.25..=1.0) * max_side,
                rng.random_range(0.3..=1.25) * max_side,
            );
            let half_diag = size.x.hypot(size.y) / 2.0;
            let roadside = rng.random::<f64>() < 0.75;
            let theta = rng.random::<f64>() * TAU;
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let gap = rng.random::<f64>() * 12.0;
            let u = [rng.random::<f64>(), rng.random::<f64>()];
            let c = if roadside {
                let p = road.point(theta);
                let n = road.outward(theta);
                let off = road.half_width + 1.0 + half_diag + gap;
                [p[0] + side * n[0] * off, p[1] + side * n[1] * off]
            } else {
                [(u[0] * 2.0 - 1.0) * extent, (u[1] * 2.0 - 1.0) * extent]
            };
            let inside = c[0].abs() <= extent && c[1].abs() <= extent && size.z / 2.0 <= extent;
            if inside && road.distance(c) > road.half_width + half_diag + 0.5 {
                placed = Some(BoxShape {
                    center: Vector3::new(c[0], c[1], size.z / 2.0),
                    size,
                    rgb: building_colors[i % building_colors.len()],
                });
                break;
            }
        }
        static_boxes.push(placed.ok_or_else(|| {
            Error::Generation(format!("could not place static box {i}; use a larger extent"))
        })?);
    }

    let mut rng = stream_rng(seed, STREAM_OBSTACLES);
    let obstacles = (0..n_dynamic)
        .map(|i| {
            let vehicle = rng.random::<bool>();
            let size = if vehicle {
                Vector3::new(
                    rng.random_range(3.5..4.8),
                    rng.random_range(1.6..2.0),
                    rng.random_range(1.4..1.9),
                )
            } else {
                Vector3::new(0.6, 0.6, rng.random_range(1.5..1.9))
            };
            let theta = rng.random::<f64>() * TAU;
            let p = road.point(theta);
            let n = road.outward(theta);
            let t = {
                let [tx, ty] = road.tangent(theta);
                let l = tx.hypot(ty);
                [tx / l, ty / l]
            };
            let hw = road.half_width;
            let crossing = !vehicle && rng.random::<f64>() < 0.5;
            let (start, end, bulge) = if crossing {
                let reach = hw * 0.9;
                (
                    [p[0] + n[0] * reach, p[1] + n[1] * reach],
                    [p[0] - n[0] * reach, p[1] - n[1] * reach],
                    0.0,
                )
            } else {
                let half = rng.random_range(3.0..10.0);
                let lat = rng.random_range(-0.5..0.5) * hw;
                let c = [p[0] + n[0] * lat, p[1] + n[1] * lat];
                (
                    [c[0] - t[0] * half, c[1] - t[1] * half],
                    [c[0] + t[0] * half, c[1] + t[1] * half],
                    rng.random_range(-1.0..1.0) * hw * 0.4,
                )
            };
            let period = rng.random_range(20u32..80);
            let phase = rng.random_range(0..period);
            Obstacle {
                size,
                rgb: obstacle_colors[i % obstacle_colors.len()],
                track: Track {
                    start,
                    end,
                    bulge,
                    period,
                    phase,
                },
            }
        })
        .collect();

    Ok(Scene {
        seed,
        extent,
        static_boxes,
        obstacles,
        ground: Some(extent),
        road,
        ground_rgb: [110, 105, 95],
        sky_rgb: SKY_RGB,
    })
}

fn sample_face(rng: &mut ChaCha8Rng, b: &BoxShape, axis: usize, high: bool, density: f64, out: &mut Vec<[f32; 3]>) {
    let (lo, hi) = (b.min(), b.max());
    let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
    let area = b.size[a1] * b.size[a2];
    let count = (area * density).round() as usize;
    let fixed = if high { hi[axis] } else { lo[axis] };
    for _ in 0..count {
        let mut p = [0.0f64; 3];
        p[axis] = fixed;
        p[a1] = lo[a1] + rng.random::<f64>() * b.size[a1];
        p[a2] = lo[a2] + rng.random::<f64>() * b.size[a2];
        out.push(p.map(|v| v as f32));
    }
}

/// Samples the map from the ground plane and all six faces of every static
/// box at `density` points per square meter. Obstacles are never sampled.
pub fn sample_map_cloud(scene: &Scene, density: f64) -> Result<PointCloudMap> {
    if !(density > 0.0) || !density.is_finite() {
        return Err(Error::Generation(format!("density must be > 0, got {density}")));
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    if let Some(half) = scene.ground {
        let mut rng = stream_rng(scene.seed, STREAM_GROUND);
        let count = ((2.0 * half) * (2.0 * half) * density).round() as usize;
        for _ in 0..count {
            let x = (rng.random::<f64>() * 2.0 - 1.0) * half;
            let y = (rng.random::<f64>() * 2.0 - 1.0) * half;
            points.push([x as f32, y as f32, 0.0]);
        }
        colors.resize(points.len(), scene.ground_rgb);
    }
    for (i, b) in scene.static_boxes.iter().enumerate() {
        let mut rng = stream_rng(scene.seed, STREAM_FACES + i as u64);
        let before = points.len();
        for axis in 0..3 {
            for high in [false, true] {
                sample_face(&mut rng, b, axis, high, density, &mut points);
            }
        }
        colors.resize(colors.len() + points.len() - before, b.rgb);
    }
    if points.is_empty() {
        return Err(Error::Generation("scene has no static surface to sample".into()));
    }
    PointCloudMap::with_colors(points, colors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Pose>,
    /// Nominal distance between consecutive frames, meters.
    pub spacing: f64,
}

impl Trajectory {
    pub const DEFAULT_SPACING: f64 = 1.0;
}

pub fn sample_trajectory(scene: &Scene, n_frames: usize, seed: u64) -> Result<Trajectory> {
    sample_trajectory_with_spacing(scene, n_frames, seed, Trajectory::DEFAULT_SPACING)
}

/// Drives along the road loop at camera height, weaving gently inside the
/// lane, always facing the direction of travel.
pub fn sample_trajectory_with_spacing(scene: &Scene, n_frames: usize, seed: u64, spacing: f64) -> Result<Trajectory> {
    if n_frames == 0 {
        return Err(Error::Generation("n_frames must be at least 1".into()));
    }
    if !(spacing > 0.0) {
        return Err(Error::Generation(format!("spacing must be > 0, got {spacing}")));
    }
    let road = scene.road;
    let mut rng = stream_rng(seed, STREAM_TRAJECTORY);
    let mut theta = rng.random::<f64>() * TAU;
    let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let amplitude = rng.random::<f64>() * (0.3 * road.half_width).min(1.0);
    let wavelength = rng.random_range(20.0..40.0);
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let s = i as f64 * spacing;
        let [px, py] = road.point(theta);
        let [nx, ny] = road.outward(theta);
        let phase = TAU * s / wavelength;
        let lateral = amplitude * phase.sin();
        let [tx, ty] = road.tangent(theta);
        let tl = tx.hypot(ty);
        // heading: travel direction plus the weave's lateral slope
        let slope = amplitude * TAU / wavelength * phase.cos();
        let hx = dir * tx / tl + nx * slope;
        let hy = dir * ty / tl + ny * slope;
        let position = Vector3::new(px + nx * lateral, py + ny * lateral, CAMERA_HEIGHT);
        if let Some(b) = scene.static_boxes.iter().find(|b| b.contains(&position, 0.3)) {
            return Err(Error::Generation(format!(
                "trajectory frame {i} runs into the static box at {:?}; use a larger extent",
                b.center
            )));
        }
        frames.push(Pose::looking_along(position, hy.atan2(hx)));
        theta += dir * spacing / tl;
    }
    Ok(Trajectory { frames, spacing })
}

fn shade(rgb: [u8; 3], axis: usize, negative: bool) -> [u8; 3] {
    let f = match (axis, negative) {
        (2, false) => 1.0,
        (2, true) => 0.5,
        (0, false) => 0.85,
        (0, true) => 0.7,
        (1, false) => 0.95,
        _ => 0.6,
    };
    rgb.map(|c| (c as f64 * f).round() as u8)
}

// Pixel rectangle that may contain the box, or the whole image when a
// corner is behind the camera.
fn screen_rect(b: &BoxShape, pose: &Pose, k: &Intrinsics) -> Option<[usize; 4]> {
    let cam: Vec<Vector3<f64>> = b.corners().iter().map(|c| pose.apply(c)).collect();
    if cam.iter().all(|c| c.z <= 0.0) {
        return None;
    }
    if cam.iter().any(|c| c.z <= 1e-6) {
        return Some([0, k.width, 0, k.height]);
    }
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in &cam {
        let u = k.fx * c.x / c.z + k.cx;
        let v = k.fy * c.y / c.z + k.cy;
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
    }
    let clamp = |x: f64, hi: usize| x.clamp(0.0, hi as f64) as usize;
    let rect = [
        clamp(u0.floor() - 1.0, k.width),
        clamp(u1.ceil() + 1.0, k.width),
        clamp(v0.floor() - 1.0, k.height),
        clamp(v1.ceil() + 1.0, k.height),
    ];
    (rect[0] < rect[1] && rect[2] < rect[3]).then_some(rect)
}

/// Ray-casts static boxes, obstacles (at `frame_index`) and the ground with
/// flat per-face shading.
pub fn render_color_view(scene: &Scene, frame_index: usize, pose: &Pose, k: &Intrinsics) -> RgbImage {
    let boxes: Vec<BoxShape> = scene
        .static_boxes
        .iter()
        .copied()
        .chain(scene.obstacles.iter().map(|o| o.box_at(frame_index)))
        .collect();
    let visible: Vec<(BoxShape, [usize; 4])> = boxes
        .iter()
        .filter_map(|b| screen_rect(b, pose, k).map(|r| (*b, r)))
        .collect();
    let origin = *pose.translation();
    let rot = pose.rotation().to_rotation_matrix();
    let mut img = RgbImage::from_pixel(k.width as u32, k.height as u32, Rgb(scene.sky_rgb));
    for v in 0..k.height {
        for u in 0..k.width {
            let ray = Vector3::new((u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0);
            let d = rot * ray;
            let mut best = f64::INFINITY;
            let mut color = None;
            if let Some(half) = scene.ground {
                if d.z < 0.0 {
                    let t = -origin.z / d.z;
                    let p = origin + d * t;
                    if t > 0.0 && p.x.abs() <= half && p.y.abs() <= half {
                        best = t;
                        color = Some(scene.ground_rgb);
                    }
                }
            }
            for (b, r) in &visible {
                if u < r[0] || u >= r[1] || v < r[2] || v >= r[3] {
                    continue;
                }
                if let Some((t, axis, neg)) = b.ray_hit(&origin, &d) {
                    if t < best {
                        best = t;
                        color = Some(shade(b.rgb, axis, neg));
                    }
                }
            }
            if let Some(c) = color {
                img.put_pixel(u as u32, v as u32, Rgb(c));
            }
        }
    }
    img
}

/// Parameters of a generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub n_dynamic: usize,
    pub n_static: usize,
    pub extent: f64,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    /// Map points per square meter of static surface.
    pub density: f64,
    pub spacing: f64,
    pub max_trans: f64,
    pub max_rot_deg: f64,
    pub clips: Clips,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 100,
            n_dynamic: 12,
            n_static: 50,
            extent: 60.0,
            width: 832,
            height: 640,
            hfov_deg: 90.0,
            density: 5.0,
            spacing: Trajectory::DEFAULT_SPACING,
            max_trans: 0.60,
            max_rot_deg: 0.0,
            clips: Clips::default(),
        }
    }
}

impl BenchmarkSpec {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_hfov(self.width, self.height, self.hfov_deg)
    }

    pub fn scene(&self) -> Result<Scene> {
        generate_scene(self.seed, self.n_static, self.n_dynamic, self.extent)
    }
}

/// Writes a complete dataset tree under `out_dir`: map, poses, images, and
/// finally the manifest.
pub fn build_benchmark(spec: &BenchmarkSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let k = spec.intrinsics()?;
    spec.clips.validate()?;
    let scene = spec.scene()?;
    let trajectory = sample_trajectory_with_spacing(&scene, spec.n_frames, spec.seed, spec.spacing)?;
    let map = sample_map_cloud(&scene, spec.density)?;

    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let draft = DatasetManifest {
        root: out_dir.to_path_buf(),
        map: "map.pcm".into(),
        poses: "poses.csv".into(),
        images: "images".into(),
        recipe: Recipe::None,
        intrinsics: k,
        clips: spec.clips,
        splits: Splits::proportional(spec.n_frames)?,
        perturbation: PerturbationSpec {
            max_trans: spec.max_trans,
            max_rot_deg: spec.max_rot_deg,
            seed: spec.seed,
        },
    };
    // Images are rendered from the values as written, so a reader of the
    // dataset sees exactly the cameras that produced them.
    let cfg_text = draft.to_cfg_string();
    let manifest = DatasetManifest::parse(&cfg_text, out_dir)?;
    let pose_text = format_pose_csv(&trajectory.frames);
    let poses = parse_pose_csv(&pose_text)?;
    blob::write_map(&manifest.map_path(), &map)?;
    let pose_path = manifest.poses_path();
    std::fs::write(&pose_path, pose_text).map_err(|e| Error::io(&pose_path, e))?;
    for (i, pose) in poses.iter().enumerate() {
        let img = render_color_view(&scene, i, pose, &manifest.intrinsics);
        let path = manifest.image_path(i);
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    let cfg = out_dir.join(MANIFEST_FILE);
    std::fs::write(&cfg, cfg_text).map_err(|e| Error::io(&cfg, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::render_depth;

    fn one_box_scene(b: BoxShape) -> Scene {
        Scene {
            seed: 1,
            extent: 10.0,
            static_boxes: vec![b],
            obstacles: vec![],
            ground: None,
            road: Road {
                radius_x: 5.0,
                radius_y: 4.0,
                half_width: 1.0,
            },
            ground_rgb: [0, 0, 0],
            sky_rgb: SKY_RGB,
        }
    }

    #[test]
    fn paired_scenes_share_static_geometry() {
        let a = generate_scene(9, 20, 0, 60.0).unwrap();
        let b = generate_scene(9, 20, 8, 60.0).unwrap();
        assert_eq!(a.static_boxes, b.static_boxes);
        assert_eq!(b.obstacles.len(), 8);
        assert_eq!(generate_scene(9, 20, 8, 60.0).unwrap(), b);
        assert_ne!(generate_scene(10, 20, 8, 60.0).unwrap().static_boxes, b.static_boxes);
    }

    #[test]
    fn boxes_stay_inside_extent() {
        let s = generate_scene(4, 50, 10, 60.0).unwrap();
        assert_eq!(s.static_boxes.len(), 50);
        for b in &s.static_boxes {
            assert!(b.center.iter().all(|c| c.abs() <= 60.0), "{:?}", b.center);
            assert!(b.size.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn scene_preconditions() {
        assert!(generate_scene(1, 0, 0, 60.0).is_err());
        assert!(generate_scene(1, 5, 0, 0.0).is_err());
    }

    #[test]
    fn map_excludes_obstacles() {
        let a = generate_scene(2, 10, 0, 30.0).unwrap();
        let b = generate_scene(2, 10, 6, 30.0).unwrap();
        assert_eq!(sample_map_cloud(&a, 2.0).unwrap(), sample_map_cloud(&b, 2.0).unwrap());
    }

    #[test]
    fn unit_box_point_count() {
        let scene = one_box_scene(BoxShape {
            center: Vector3::new(0.0, 0.0, 0.5),
            size: Vector3::new(1.0, 1.0, 1.0),
            rgb: [1, 2, 3],
        });
        let map = sample_map_cloud(&scene, 100.0).unwrap();
        assert!((540..=660).contains(&map.len()), "{}", map.len());
        for p in map.points() {
            let on_face = p.iter().any(|c| (c.abs() - 0.5).abs() < 1e-6 || c.abs() < 1e-6 || (c - 1.0).abs() < 1e-6);
            assert!(on_face);
        }
    }

    #[test]
    fn ground_only_is_flat() {
        let mut scene = generate_scene(3, 1, 0, 10.0).unwrap();
        scene.static_boxes.clear();
        let map = sample_map_cloud(&scene, 1.0).unwrap();
        assert_eq!(map.len(), 400);
        assert!(map.points().iter().all(|p| p[2] == 0.0));
        assert!(sample_map_cloud(&scene, 0.0).is_err());
    }

    #[test]
    fn empty_scene_is_sky() {
        let mut scene = one_box_scene(BoxShape {
            center: Vector3::new(0.0, 0.0, 0.5),
            size: Vector3::new(1.0, 1.0, 1.0),
            rgb: [1, 2, 3],
        });
        scene.static_boxes.clear();
        let k = Intrinsics::from_hfov(40, 30, 90.0).unwrap();
        let img = render_color_view(&scene, 0, &Pose::looking_along(Vector3::new(0.0, 0.0, 1.5), 0.0), &k);
        assert!(img.pixels().all(|p| *p == Rgb(SKY_RGB)));
    }

    // Marching oracle: first box containing a point along the ray.
    fn march(boxes: &[BoxShape], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<usize> {
        let mut t = 0.0;
        while t < 80.0 {
            let p = o + d * t;
            if let Some(i) = boxes.iter().position(|b| b.contains(&p, 0.0)) {
                return Some(i);
            }
            t += 0.005;
        }
        None
    }

    #[test]
    fn obstacle_occludes_static_box() {
        let wall = BoxShape {
            center: Vector3::new(20.0, 0.0, 2.0),
            size: Vector3::new(1.0, 10.0, 4.0),
            rgb: [200, 0, 0],
        };
        let mut scene = one_box_scene(wall);
        scene.obstacles.push(Obstacle {
            size: Vector3::new(1.0, 1.5, 1.8),
            rgb: [0, 0, 200],
            track: Track {
                start: [10.0, 0.0],
                end: [10.0, 0.0],
                bulge: 0.0,
                period: 10,
                phase: 0,
            },
        });
        let pose = Pose::looking_along(Vector3::new(0.0, 0.0, 1.5), 0.0);
        let k = Intrinsics::from_hfov(64, 48, 60.0).unwrap();
        let img = render_color_view(&scene, 0, &pose, &k);
        let boxes = [wall, scene.obstacles[0].box_at(0)];
        let rot = pose.rotation().to_rotation_matrix();
        let mut occluded = 0;
        for v in (0..48).step_by(3) {
            for u in (0..64).step_by(3) {
                let d = rot * Vector3::new((u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0);
                let px = img.get_pixel(u, v).0;
                match march(&boxes, pose.translation(), &d) {
                    Some(1) => {
                        assert_eq!(px[0], 0, "pixel {u},{v}");
                        assert!(px[2] > 0);
                        // the wall is behind this pixel too
                        if wall.ray_hit(pose.translation(), &d).is_some() {
                            occluded += 1;
                        }
                    }
                    Some(0) => assert!(px[0] > 0 && px[2] == 0, "pixel {u},{v}"),
                    _ => assert_eq!(px, SKY_RGB),
                }
            }
        }
        assert!(occluded > 0);
    }

    #[test]
    fn trajectory_contract() {
        let scene = generate_scene(5, 40, 0, 60.0).unwrap();
        let one = sample_trajectory(&scene, 1, 3).unwrap();
        assert_eq!(one.frames.len(), 1);
        let t = sample_trajectory(&scene, 150, 3).unwrap();
        assert_eq!(t, sample_trajectory(&scene, 150, 3).unwrap());
        for w in t.frames.windows(2) {
            let step = (w[1].translation() - w[0].translation()).norm();
            assert!(step > 0.0 && step <= 2.0 * t.spacing, "{step}");
            assert_eq!(w[1].translation().z, CAMERA_HEIGHT);
        }
        assert!(sample_trajectory(&scene, 0, 3).is_err());
    }

    #[test]
    fn crowded_scene_fails_with_hint() {
        let mut scene = generate_scene(5, 5, 0, 60.0).unwrap();
        // a box straddling the whole road loop
        scene.static_boxes.push(BoxShape {
            center: Vector3::zeros(),
            size: Vector3::new(200.0, 200.0, 10.0),
            rgb: [0; 3],
        });
        let err = sample_trajectory(&scene, 10, 1).unwrap_err().to_string();
        assert!(err.contains("larger extent"), "{err}");
    }

    #[test]
    fn dynamic_frames_differ_where_depth_cannot() {
        let stat = generate_scene(12, 30, 0, 40.0).unwrap();
        let dyn_ = generate_scene(12, 30, 14, 40.0).unwrap();
        let traj = sample_trajectory(&stat, 40, 12).unwrap();
        let map_s = sample_map_cloud(&stat, 1.0).unwrap();
        let map_d = sample_map_cloud(&dyn_, 1.0).unwrap();
        let k = Intrinsics::from_hfov(64, 48, 90.0).unwrap();
        let mut best = 0.0f64;
        for (i, pose) in traj.frames.iter().enumerate() {
            let a = render_color_view(&stat, i, pose, &k);
            let b = render_color_view(&dyn_, i, pose, &k);
            let diff = a.pixels().zip(b.pixels()).filter(|(x, y)| x != y).count();
            let frac = diff as f64 / (64.0 * 48.0);
            let same_depth = render_depth(&map_s, pose, &k, Clips::default()) == render_depth(&map_d, pose, &k, Clips::default());
            assert!(same_depth);
            best = best.max(frac);
        }
        assert!(best >= 0.01, "max differing fraction {best}");
    }
}
