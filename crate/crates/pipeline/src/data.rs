//! Loaded datasets and network input preparation.

use std::path::Path;

use fuseloc_core::dataset::{DatasetManifest, Split};
use fuseloc_core::geometry::perturb_pose;
use fuseloc_core::projection::{blob, render_depth, voxel_downsample};
use fuseloc_core::{Clips, DepthImage, Intrinsics, PerturbationSpec, PointCloudMap, Pose};
use fuseloc_net::{FrameInput, Tensor};
use image::RgbImage;

use crate::error::{PipelineError, Result};
use crate::preprocess::{apply_recipe, image_to_tensor, recipe_intrinsics};

/// A dataset with its map and preprocessed color images held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub poses: Vec<Pose>,
    pub map: PointCloudMap,
    /// Intrinsics at network resolution (after the recipe).
    pub intrinsics: Intrinsics,
    images: Vec<RgbImage>,
}

/// One frame of a split, with its deterministic rough pose.
#[derive(Debug, Clone)]
pub struct Frame<'a> {
    pub index: usize,
    pub gt: Pose,
    pub rough: Pose,
    pub color: &'a RgbImage,
}

impl Dataset {
    /// Loads a manifest (file or dataset directory), its map, poses and
    /// every image, applying the manifest's preprocessing recipe.
    pub fn open(path: &Path) -> Result<Self> {
        let (manifest, poses) = DatasetManifest::load(path)?;
        let map = blob::read_map(&manifest.map_path())?;
        let intrinsics = recipe_intrinsics(manifest.recipe, &manifest.intrinsics)?;
        let images = (0..poses.len())
            .map(|i| {
                let p = manifest.image_path(i);
                let raw = image::open(&p)
                    .map_err(|source| PipelineError::Image { path: p.clone(), source })?
                    .to_rgb8();
                if (raw.width() as usize, raw.height() as usize) != (manifest.intrinsics.width, manifest.intrinsics.height) {
                    return Err(PipelineError::Recipe(format!(
                        "{} is {}×{}, manifest says {}×{}",
                        p.display(),
                        raw.width(),
                        raw.height(),
                        manifest.intrinsics.width,
                        manifest.intrinsics.height
                    )));
                }
                Ok(apply_recipe(manifest.recipe, &raw, &manifest.intrinsics)?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            poses,
            map,
            intrinsics,
            images,
        })
    }

    /// Replaces the map by its voxel-grid centroids.
    pub fn with_voxel(mut self, voxel: f64) -> Result<Self> {
        self.map = voxel_downsample(&self.map, voxel)?;
        Ok(self)
    }

    /// Overrides the seed of the rough-pose draws.
    pub fn with_perturbation_seed(mut self, seed: u64) -> Self {
        self.manifest.perturbation.seed = seed;
        self
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn clips(&self) -> Clips {
        self.manifest.clips
    }

    pub fn perturbation(&self) -> &PerturbationSpec {
        &self.manifest.perturbation
    }

    /// `(height, width)` at network resolution.
    pub fn resolution(&self) -> (usize, usize) {
        (self.intrinsics.height, self.intrinsics.width)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest.splits.range(split).collect()
    }

    pub fn color(&self, index: usize) -> &RgbImage {
        &self.images[index]
    }

    /// The benchmark's rough pose for `index`, drawn from the manifest's
    /// perturbation spec keyed by frame index.
    pub fn rough_pose(&self, index: usize) -> Pose {
        perturb_pose(&self.poses[index], &self.manifest.perturbation, index as u64)
    }

    pub fn frame(&self, index: usize) -> Frame<'_> {
        Frame {
            index,
            gt: self.poses[index],
            rough: self.rough_pose(index),
            color: &self.images[index],
        }
    }

    pub fn frames(&self, split: Split) -> impl Iterator<Item = Frame<'_>> + '_ {
        self.manifest.splits.range(split).map(|i| self.frame(i))
    }

    pub fn render_depth(&self, pose: &Pose) -> DepthImage {
        render_depth(&self.map, pose, &self.intrinsics, self.manifest.clips)
    }

    /// Network input for frame `index` with depth rendered at `rough`.
    pub fn input(&self, index: usize, rough: &Pose) -> FrameInput<f32> {
        FrameInput {
            color: image_to_tensor(&self.images[index]),
            depth: depth_to_tensor(&self.render_depth(rough), self.manifest.clips),
        }
    }
}

/// `[1, h, w]` tensor of depth divided by the far clip; empty pixels stay 0.
pub fn depth_to_tensor(depth: &DepthImage, clips: Clips) -> Tensor<f32> {
    let far = clips.far as f32;
    Tensor::new(
        &[1, depth.height(), depth.width()],
        depth.values().iter().map(|d| d / far).collect(),
    )
}
