//! Image preprocessing recipes that bring camera images to network
//! resolution, with the matching intrinsics adjustment.
//!
//! Pixel `(u, v)` covers `[u, u + 1) × [v, v + 1)` in the continuous image
//! plane the intrinsics refer to. Resizing samples at pixel centers, so a
//! uniform scale `s` maps continuous coordinates by `x ↦ s·x` and a crop at
//! `(x0, y0)` subtracts the offset.

use fuseloc_core::dataset::Recipe;
use fuseloc_core::Intrinsics;
use fuseloc_net::tensor::resize_bilinear;
use fuseloc_net::Tensor;
use image::RgbImage;

use crate::error::{PipelineError, Result};

/// Padded KITTI frame size `(height, width)`.
pub const KITTI_SIZE: (usize, usize) = (384, 1280);
/// Crop size `(height, width)` of the resize-and-crop recipes.
pub const CROP_SIZE: (usize, usize) = (640, 832);

/// `[3, h, w]` tensor with channels scaled to `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = p.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn tensor_to_image(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = match *t.shape() {
        [3, h, w] => (h, w),
        ref s => panic!("expected [3, H, W], got {s:?}"),
    };
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let ch = |c: usize| (d[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([ch(0), ch(1), ch(2)])
    })
}

/// Zero-pads on the bottom and right to 384×1280.
pub fn preprocess_kitti(img: &RgbImage) -> Result<RgbImage> {
    let (h, w) = KITTI_SIZE;
    if img.height() as usize > h || img.width() as usize > w {
        return Err(PipelineError::Recipe(format!(
            "KITTI padding needs at most {h}×{w}, image is {}×{}",
            img.height(),
            img.width()
        )));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    image::imageops::replace(&mut out, img, 0, 0);
    Ok(out)
}

/// Size after scaling by `num/den`, rounded to the nearest pixel.
pub fn scaled_size(n: usize, num: usize, den: usize) -> usize {
    (n * num + den / 2) / den
}

/// Geometry of a scale-then-center-crop step.
struct ScaleCrop {
    scaled: (usize, usize),
    offset: (usize, usize),
    k: Intrinsics,
}

fn scale_crop_geometry(k: &Intrinsics, (num, den): (usize, usize), out_h: usize, out_w: usize) -> Result<ScaleCrop> {
    if num == 0 || den == 0 {
        return Err(PipelineError::Recipe(format!("scale {num}/{den} is not positive")));
    }
    let (h, w) = (k.height, k.width);
    let (sh, sw) = (scaled_size(h, num, den), scaled_size(w, num, den));
    if sh < out_h || sw < out_w {
        return Err(PipelineError::Recipe(format!(
            "scaled image {sh}×{sw} is smaller than the {out_h}×{out_w} crop"
        )));
    }
    let (y0, x0) = ((sh - out_h) / 2, (sw - out_w) / 2);
    let (sx, sy) = (sw as f64 / w as f64, sh as f64 / h as f64);
    let k = Intrinsics::new(
        k.fx * sx,
        k.fy * sy,
        k.cx * sx - x0 as f64,
        k.cy * sy - y0 as f64,
        out_w,
        out_h,
    )?;
    Ok(ScaleCrop {
        scaled: (sh, sw),
        offset: (y0, x0),
        k,
    })
}

/// Bilinear resize by `num/den`, then a center crop to `out_h × out_w`.
/// `k` must describe `img`.
pub fn preprocess_scale_crop(
    img: &RgbImage,
    k: &Intrinsics,
    scale: (usize, usize),
    out_h: usize,
    out_w: usize,
) -> Result<(RgbImage, Intrinsics)> {
    if (img.width() as usize, img.height() as usize) != (k.width, k.height) {
        return Err(PipelineError::Recipe(format!(
            "image is {}×{} but intrinsics describe {}×{}",
            img.height(),
            img.width(),
            k.height,
            k.width
        )));
    }
    let geo = scale_crop_geometry(k, scale, out_h, out_w)?;
    let (sh, sw) = geo.scaled;
    let (y0, x0) = geo.offset;
    let resized = resize_bilinear(&image_to_tensor(img), sh, sw);
    let d = resized.data();
    let mut crop = vec![0.0f32; 3 * out_h * out_w];
    for c in 0..3 {
        for y in 0..out_h {
            let src = &d[c * sh * sw + (y + y0) * sw + x0..][..out_w];
            crop[c * out_h * out_w + y * out_w..][..out_w].copy_from_slice(src);
        }
    }
    Ok((tensor_to_image(&Tensor::new(&[3, out_h, out_w], crop)), geo.k))
}

fn recipe_scale(recipe: Recipe) -> Option<(usize, usize)> {
    match recipe {
        Recipe::Nuscenes => Some((3, 4)),
        Recipe::Meijo => Some((2, 3)),
        Recipe::None | Recipe::Kitti => None,
    }
}

/// Applies a dataset recipe; `k` describes the raw image.
pub fn apply_recipe(recipe: Recipe, img: &RgbImage, k: &Intrinsics) -> Result<(RgbImage, Intrinsics)> {
    match recipe_scale(recipe) {
        Some(scale) => preprocess_scale_crop(img, k, scale, CROP_SIZE.0, CROP_SIZE.1),
        None if recipe == Recipe::Kitti => Ok((preprocess_kitti(img)?, recipe_intrinsics(recipe, k)?)),
        None => Ok((img.clone(), *k)),
    }
}

/// Intrinsics after a recipe, computed without touching pixels.
pub fn recipe_intrinsics(recipe: Recipe, k: &Intrinsics) -> Result<Intrinsics> {
    match recipe_scale(recipe) {
        Some(scale) => Ok(scale_crop_geometry(k, scale, CROP_SIZE.0, CROP_SIZE.1)?.k),
        None if recipe == Recipe::Kitti => {
            let (h, w) = KITTI_SIZE;
            if k.height > h || k.width > w {
                return Err(PipelineError::Recipe(format!(
                    "KITTI padding needs at most {h}×{w}, intrinsics describe {}×{}",
                    k.height, k.width
                )));
            }
            Ok(Intrinsics::new(k.fx, k.fy, k.cx, k.cy, w, h)?)
        }
        None => Ok(*k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 251) as u8, (y % 241) as u8, 200]))
    }

    #[test]
    fn kitti_pads_bottom_right() {
        let img = gradient(1241, 376);
        let out = preprocess_kitti(&img).unwrap();
        assert_eq!(out.dimensions(), (1280, 384));
        assert_eq!(out.get_pixel(1240, 375), img.get_pixel(1240, 375));
        for x in 0..1280 {
            for y in 376..384 {
                assert_eq!(out.get_pixel(x, y).0, [0, 0, 0]);
            }
        }
        for y in 0..376 {
            assert_eq!(out.get_pixel(1241, y).0, [0, 0, 0]);
        }
        let full = gradient(1280, 384);
        assert_eq!(preprocess_kitti(&full).unwrap(), full);
        assert!(preprocess_kitti(&gradient(1300, 400)).is_err());
    }

    #[test]
    fn unit_scale_full_crop_is_identity() {
        let img = gradient(40, 24);
        let k = Intrinsics::new(30.0, 31.0, 20.0, 12.0, 40, 24).unwrap();
        let (out, k2) = preprocess_scale_crop(&img, &k, (1, 1), 24, 40).unwrap();
        assert_eq!(out, img);
        assert_eq!(k2, k);
    }

    #[test]
    fn crop_larger_than_scaled_image_is_refused() {
        let img = gradient(100, 80);
        let k = Intrinsics::new(50.0, 50.0, 50.0, 40.0, 100, 80).unwrap();
        assert!(preprocess_scale_crop(&img, &k, (1, 2), 48, 48).is_err());
    }

    #[test]
    fn recipe_intrinsics_match_pixel_path() {
        let k = Intrinsics::new(1000.0, 1000.0, 800.0, 450.0, 1600, 900).unwrap();
        let img = gradient(1600, 900);
        let (_, k_pix) = apply_recipe(Recipe::Nuscenes, &img, &k).unwrap();
        assert_eq!(recipe_intrinsics(Recipe::Nuscenes, &k).unwrap(), k_pix);
    }

    #[test]
    fn tensor_round_trip() {
        let img = gradient(7, 5);
        assert_eq!(tensor_to_image(&image_to_tensor(&img)), img);
    }
}
