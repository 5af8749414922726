//! Depth rendering against a sort-based per-pixel minimum.

use fuseloc_core::geometry::{Intrinsics, Pose};
use fuseloc_core::projection::{backproject_pixel, render_depth, Clips, PointCloudMap};
use nalgebra::Vector3;
use proptest::prelude::*;

/// Per-pixel nearest depth and the index of the point that produced it.
fn oracle(points: &[[f32; 3]], pose: &Pose, k: &Intrinsics, clips: Clips) -> Vec<Option<(f32, usize)>> {
    let mut hits = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let c = pose.apply(&Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64));
        if c.z < clips.near || c.z > clips.far {
            continue;
        }
        let u = k.fx * c.x / c.z + k.cx;
        let v = k.fy * c.y / c.z + k.cy;
        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
            continue;
        }
        hits.push((v.floor() as usize * k.width + u.floor() as usize, c.z, i));
    }
    hits.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; k.width * k.height];
    for (px, z, i) in hits {
        out[px].get_or_insert((z as f32, i));
    }
    out
}

fn scene() -> impl Strategy<Value = (Vec<[f32; 3]>, Pose)> {
    let point = (-8.0f32..8.0, -6.0f32..6.0, -2.0f32..40.0).prop_map(|(x, y, z)| [x, y, z]);
    let pose = (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -0.2f64..0.2, -0.2f64..0.2, -0.2f64..0.2)
        .prop_map(|(x, y, z, a, b, c)| Pose::new(Vector3::new(x, y, z), [1.0, a, b, c]).unwrap());
    (prop::collection::vec(point, 0..3000), pose)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn render_matches_oracle_bit_for_bit((mut points, pose) in scene(), dup in 0usize..50) {
        // Repeat some points so equal-depth ties are exercised.
        let extra: Vec<[f32; 3]> = points.iter().take(dup).copied().collect();
        points.extend(extra);
        let k = Intrinsics::new(40.0, 42.0, 31.5, 23.25, 64, 48).unwrap();
        let clips = Clips { near: 0.5, far: 30.0 };
        let map = PointCloudMap::new(points.clone()).unwrap();
        let depth = render_depth(&map, &pose, &k, clips);
        let want = oracle(&points, &pose, &k, clips);
        for (px, w) in want.iter().enumerate() {
            let got = depth.values()[px];
            prop_assert_eq!(got.to_bits(), w.map_or(0.0f32, |(z, _)| z).to_bits(), "pixel {}", px);
        }
        for (px, w) in want.iter().enumerate() {
            let Some((z, i)) = *w else { continue };
            let (u, v) = (px % k.width, px / k.width);
            let back = backproject_pixel(u, v, z as f64, &pose, &k).unwrap();
            let p = points[i];
            let orig = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            let zf = z as f64;
            let lateral = 0.5 * zf * (1.0 / k.fx).hypot(1.0 / k.fy);
            prop_assert!((back - orig).norm() <= lateral + 1e-6 * zf, "pixel {}", px);
        }
    }
}
