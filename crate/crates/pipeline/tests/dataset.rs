mod common;

use fuseloc::eval::{evaluate, IdentityCorrector, OracleCorrector};
use fuseloc::{Dataset, PipelineError};
use fuseloc_core::dataset::Split;
use fuseloc_core::geometry::translation_error_cm;

/// Expected norm of a vector with three independent U(-a, a) components,
/// by midpoint-rule integration over the cube.
fn mean_norm_uniform_cube(a: f64, cells: usize) -> f64 {
    let h = 2.0 * a / cells as f64;
    let c = |i: usize| -a + (i as f64 + 0.5) * h;
    let mut sum = 0.0;
    for i in 0..cells {
        for j in 0..cells {
            for k in 0..cells {
                sum += (c(i).powi(2) + c(j).powi(2) + c(k).powi(2)).sqrt();
            }
        }
    }
    sum / (cells * cells * cells) as f64
}

#[test]
fn cube_oracle_matches_known_constant() {
    // Mean distance from the center of [-1, 1]^3 to a uniform point.
    let m = mean_norm_uniform_cube(0.6, 160);
    assert!((m - 0.6 * 0.960_591_956_455_052_9).abs() < 1e-5, "{m}");
}

#[test]
fn synthetic_benchmark_loads() {
    let dir = tempfile::tempdir().unwrap();
    common::build_small(dir.path(), 5, 30);
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.len(), 30);
    assert_eq!(ds.resolution(), (64, 96));
    let all: Vec<usize> = [Split::Train, Split::Val, Split::Eval]
        .into_iter()
        .flat_map(|s| ds.split_indices(s))
        .collect();
    assert_eq!(all, (0..30).collect::<Vec<_>>());
    let f = ds.frame(3);
    assert_eq!((f.color.width(), f.color.height()), (96, 64));
    let input = ds.input(3, &f.rough);
    assert_eq!(input.color.shape(), &[3, 64, 96]);
    assert_eq!(input.depth.shape(), &[1, 64, 96]);
    assert!(input.depth.data().iter().all(|d| (0.0..=1.0).contains(d)));
    assert!(input.depth.data().iter().any(|d| *d > 0.0));
}

#[test]
fn image_count_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    common::build_small(dir.path(), 5, 12);
    std::fs::remove_file(dir.path().join("images/000011.png")).unwrap();
    let err = Dataset::open(dir.path()).unwrap_err();
    assert!(matches!(err, PipelineError::Core(_)), "{err}");
    assert!(err.to_string().contains("12 pose rows but 11 images"), "{err}");
}

#[test]
fn extra_pose_row_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    common::build_small(dir.path(), 5, 12);
    let poses = dir.path().join("poses.csv");
    let mut text = std::fs::read_to_string(&poses).unwrap();
    text.push_str("12,0,0,1.5,1,0,0,0\n");
    std::fs::write(&poses, text).unwrap();
    assert!(Dataset::open(dir.path()).is_err());
}

#[test]
fn overlapping_splits_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    common::build_small(dir.path(), 5, 12);
    let cfg = dir.path().join("manifest.cfg");
    let text = std::fs::read_to_string(&cfg).unwrap();
    let text = text
        .lines()
        .map(|l| if l.starts_with("splits=") { "splits=train:0-7,val:7-9,eval:10-11" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&cfg, text).unwrap();
    assert!(Dataset::open(dir.path()).is_err());
}

#[test]
fn rough_poses_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    common::build_small(dir.path(), 8, 20);
    let a = Dataset::open(dir.path()).unwrap();
    let b = Dataset::open(dir.path()).unwrap();
    let first: Vec<_> = a.frames(Split::Train).map(|f| f.rough).collect();
    let again: Vec<_> = a.frames(Split::Train).map(|f| f.rough).collect();
    let other: Vec<_> = b.frames(Split::Train).map(|f| f.rough).collect();
    assert_eq!(first, again);
    assert_eq!(first, other);
    let reseeded: Vec<_> = b.with_perturbation_seed(99).frames(Split::Train).map(|f| f.rough).collect();
    assert_ne!(first, reseeded);
}

#[test]
fn identity_stub_scores_the_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    common::build_small(dir.path(), 21, 1000);
    let ds = Dataset::open(dir.path()).unwrap();

    let m = evaluate(&ds, &IdentityCorrector, Split::Eval).unwrap();
    assert_eq!(m.count, 150);
    for (&i, &e) in m.frames.iter().zip(&m.per_frame_cm) {
        let offset = ds.rough_pose(i).translation() - ds.poses[i].translation();
        assert!((e - 100.0 * offset.norm()).abs() < 1e-9, "frame {i}");
    }

    let oracle_cm = 100.0 * mean_norm_uniform_cube(0.6, 160);
    let all: Vec<f64> = (0..ds.len())
        .map(|i| translation_error_cm(&ds.rough_pose(i), &ds.poses[i]))
        .collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    assert!((mean - oracle_cm).abs() < 2.0, "mean {mean} vs oracle {oracle_cm}");
}

#[test]
fn oracle_stub_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    common::build_small(dir.path(), 4, 20);
    let ds = Dataset::open(dir.path()).unwrap();
    let m = evaluate(&ds, &OracleCorrector, Split::Eval).unwrap();
    assert_eq!((m.mean_cm, m.median_cm), (0.0, 0.0));
}

#[test]
fn metrics_recompute_from_per_frame_list() {
    let dir = tempfile::tempdir().unwrap();
    common::build_small(dir.path(), 4, 40);
    let ds = Dataset::open(dir.path()).unwrap();
    let m = evaluate(&ds, &IdentityCorrector, Split::Train).unwrap();
    assert_eq!(m.count, m.per_frame_cm.len());
    assert_eq!(m.mean_cm, fuseloc::eval::mean(&m.per_frame_cm));
    assert_eq!(m.median_cm, fuseloc::eval::median(&m.per_frame_cm));
}

#[test]
fn resolution_mismatch_refuses_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    common::build_small(dir.path(), 4, 12);
    let ds = Dataset::open(dir.path()).unwrap();
    let model = fuseloc_net::Model::<f32>::new(fuseloc_net::NetworkConfig::reduced(64, 128).with_vit_input(32), 0).unwrap();
    assert!(matches!(evaluate(&ds, &model, Split::Eval), Err(PipelineError::Mismatch(_))));
}
