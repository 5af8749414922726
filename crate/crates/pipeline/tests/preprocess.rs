use fuseloc::preprocess::{apply_recipe, preprocess_scale_crop, CROP_SIZE, KITTI_SIZE};
use fuseloc_core::dataset::Recipe;
use fuseloc_core::Intrinsics;
use image::{Rgb, RgbImage};
use proptest::prelude::*;

const SIGMA: f64 = 4.0;

/// Continuous image coordinates of camera-frame point `p`.
fn project(k: &Intrinsics, p: [f64; 3]) -> (f64, f64) {
    (k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy)
}

/// Black image with a Gaussian spot centered on continuous point `(u, v)`.
fn spot(w: u32, h: u32, (u, v): (f64, f64)) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let d2 = (x as f64 + 0.5 - u).powi(2) + (y as f64 + 0.5 - v).powi(2);
        let g = (255.0 * (-d2 / (2.0 * SIGMA * SIGMA)).exp()).round() as u8;
        Rgb([g, g, g])
    })
}

/// Intensity-weighted centroid in continuous coordinates.
fn centroid(img: &RgbImage) -> (f64, f64) {
    let (mut s, mut su, mut sv) = (0.0, 0.0, 0.0);
    for (x, y, p) in img.enumerate_pixels() {
        let w = p.0[0] as f64;
        s += w;
        su += w * (x as f64 + 0.5);
        sv += w * (y as f64 + 0.5);
    }
    (su / s, sv / s)
}

fn camera(w: usize, h: usize) -> Intrinsics {
    let f = 0.6 * w as f64;
    Intrinsics::new(f, f * 1.01, w as f64 / 2.0 + 3.3, h as f64 / 2.0 - 2.7, w, h).unwrap()
}

/// `(a, b)` places the point within the part of the raw image that survives
/// the crop, as fractions of that window's size around its center.
fn check(recipe: Recipe, (h, w): (usize, usize), scale: f64, (a, b, z): (f64, f64, f64)) -> Result<(), TestCaseError> {
    let k = camera(w, h);
    let win_w = (CROP_SIZE.1 as f64 / scale).min(w as f64);
    let win_h = (CROP_SIZE.0 as f64 / scale).min(h as f64);
    let (u, v) = (w as f64 / 2.0 + a * win_w, h as f64 / 2.0 + b * win_h);
    let p = [(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z];
    let img = spot(w as u32, h as u32, project(&k, p));
    let (out, k2) = apply_recipe(recipe, &img, &k).unwrap();
    prop_assert_eq!((out.height() as usize, out.width() as usize), (k2.height, k2.width));
    let (eu, ev) = project(&k2, p);
    let (cu, cv) = centroid(&out);
    prop_assert!((eu - cu).abs() < 0.5 && (ev - cv).abs() < 0.5, "expected ({eu}, {ev}), spot at ({cu}, {cv})");
    Ok(())
}

fn central_point() -> impl Strategy<Value = (f64, f64, f64)> {
    (-0.4f64..0.4, -0.4f64..0.4, 2.0f64..50.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn nuscenes_recipe_keeps_projections(p in central_point()) {
        check(Recipe::Nuscenes, (900, 1600), 0.75, p)?;
    }

    #[test]
    fn meijo_recipe_keeps_projections(p in central_point()) {
        check(Recipe::Meijo, (1080, 1920), 2.0 / 3.0, p)?;
    }

    #[test]
    fn kitti_recipe_keeps_projections(p in central_point()) {
        check(Recipe::Kitti, (376, 1241), 1.0, p)?;
    }
}

#[test]
fn recipe_output_sizes() {
    for (recipe, (h, w), want) in [
        (Recipe::Nuscenes, (900, 1600), CROP_SIZE),
        (Recipe::Meijo, (1080, 1920), CROP_SIZE),
        (Recipe::Kitti, (376, 1241), KITTI_SIZE),
    ] {
        let k = camera(w, h);
        let (out, k2) = apply_recipe(recipe, &RgbImage::new(w as u32, h as u32), &k).unwrap();
        assert_eq!((out.height() as usize, out.width() as usize), want, "{recipe:?}");
        assert_eq!((k2.height, k2.width), want);
    }
}

#[test]
fn scale_crop_intrinsics_arithmetic() {
    // 900×1600 at 3/4 is 675×1200; the 640×832 crop starts at (17, 184).
    let k = Intrinsics::new(1000.0, 1000.0, 800.0, 450.0, 1600, 900).unwrap();
    let (_, k2) = preprocess_scale_crop(&RgbImage::new(1600, 900), &k, (3, 4), 640, 832).unwrap();
    assert_eq!((k2.fx, k2.fy), (750.0, 750.0));
    assert_eq!((k2.cx, k2.cy), (600.0 - 184.0, 337.5 - 17.0));
}

#[test]
fn mismatched_recipes_are_refused() {
    let k = camera(1300, 400);
    assert!(apply_recipe(Recipe::Kitti, &RgbImage::new(1300, 400), &k).is_err());
    let small = camera(800, 600);
    assert!(apply_recipe(Recipe::Nuscenes, &RgbImage::new(800, 600), &small).is_err());
    assert!(apply_recipe(Recipe::Nuscenes, &RgbImage::new(801, 600), &small).is_err());
}
