mod common;

use fuseloc::experiments::{ablate, ablation_table, compare_static_dynamic, CompareConfig};
use fuseloc::train::{train, write_outcome, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};
use fuseloc::{Dataset, NoiseMode, PipelineError, TrainConfig};
use fuseloc_net::checkpoint::{encode_checkpoint, CheckpointMeta};
use fuseloc_net::{AblationMode, AdamConfig, Model, NetworkConfig};

fn net() -> NetworkConfig {
    NetworkConfig::reduced(64, 96).with_vit_input(32)
}

fn cfg(steps: u64, noise: NoiseMode) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        seed: 17,
        noise,
        eval_interval: 2,
        ..TrainConfig::default()
    }
}

fn dataset(frames: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    common::build_small(dir.path(), 6, frames);
    let ds = Dataset::open(dir.path()).unwrap();
    (dir, ds)
}

#[test]
fn zero_steps_keep_the_initialization() {
    let (_d, ds) = dataset(12);
    let c = cfg(0, NoiseMode::Resampled);
    let out = train(&ds, &net(), &c).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.best_step, 0);
    let init = Model::<f32>::new(net(), c.seed).unwrap();
    assert_eq!(out.best.params(), init.params());

    let dir = tempfile::tempdir().unwrap();
    write_outcome(&out, &c, dir.path()).unwrap();
    let meta = CheckpointMeta { step: 0, seed: c.seed };
    let file = std::fs::read(dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(file, encode_checkpoint(&init, meta));
    assert_eq!(std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap(), file);
    let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log, "step,loss,lr,grad_norm,val_mean_cm\n");
}

#[test]
fn same_seed_gives_identical_runs() {
    let (_d, ds) = dataset(12);
    for noise in [NoiseMode::Fixed, NoiseMode::Resampled] {
        let c = cfg(4, noise);
        let a = train(&ds, &net(), &c).unwrap();
        let b = train(&ds, &net(), &c).unwrap();
        assert_eq!(a.log, b.log, "{noise:?}");
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.log.len(), 4);
        assert!(a.log[1].val_mean_cm.is_some() && a.log[0].val_mean_cm.is_none());
        let other = train(&ds, &net(), &TrainConfig { seed: 18, ..c }).unwrap();
        assert_ne!(a.log, other.log);
    }
}

#[test]
fn best_checkpoint_tracks_validation() {
    let (_d, ds) = dataset(12);
    let out = train(&ds, &net(), &cfg(6, NoiseMode::Fixed)).unwrap();
    let vals: Vec<(u64, f64)> = out.log.iter().filter_map(|e| e.val_mean_cm.map(|v| (e.step, v))).collect();
    assert_eq!(vals.len(), 3);
    if out.best_step > 0 {
        let (_, v) = vals.iter().find(|(s, _)| *s == out.best_step).unwrap();
        assert_eq!(*v, out.best_val_cm);
        assert!(vals.iter().all(|(_, x)| *x >= out.best_val_cm));
    }
    let again = fuseloc::evaluate(&ds, &out.best, fuseloc_core::dataset::Split::Val).unwrap();
    assert_eq!(again.mean_cm, out.best_val_cm);
}

#[test]
fn divergence_aborts_with_step() {
    let (_d, ds) = dataset(12);
    let c = TrainConfig {
        adam: AdamConfig {
            lr: 1e30,
            clip_norm: None,
            ..AdamConfig::default()
        },
        ..cfg(50, NoiseMode::Fixed)
    };
    match train(&ds, &net(), &c) {
        Err(PipelineError::Divergence { step, .. }) => assert!(step < 50),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn mismatched_resolution_is_refused() {
    let (_d, ds) = dataset(12);
    let bad = NetworkConfig::reduced(64, 128).with_vit_input(32);
    assert!(matches!(train(&ds, &bad, &cfg(1, NoiseMode::Fixed)), Err(PipelineError::Mismatch(_))));
}

#[test]
fn ablation_has_one_row_per_mode() {
    let (_d, ds) = dataset(12);
    let modes = [AblationMode::RgbResize, AblationMode::RgbResizeConv];
    let rows = ablate(&ds, &net(), &cfg(1, NoiseMode::Fixed), &modes).unwrap();
    assert_eq!(rows.iter().map(|r| r.mode).collect::<Vec<_>>(), modes);
    let table = ablation_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("rgb_resize,") && lines[2].starts_with("rgb_resize_conv,"));
}

#[test]
fn untrained_comparison_sees_no_dynamic_effect() {
    let dir = tempfile::tempdir().unwrap();
    let report = compare_static_dynamic(
        &[2, 3],
        &CompareConfig {
            bench: common::small_spec(0, 40, 10),
            net: net(),
            train: cfg(0, NoiseMode::Fixed),
            work_dir: dir.path().to_path_buf(),
        },
    )
    .unwrap();
    assert_eq!(report.seeds.len(), 2);
    for c in &report.seeds {
        for cell in [c.fusion_static, c.fusion_dynamic, c.local_static, c.local_dynamic] {
            assert!((25.0..90.0).contains(&cell), "{c:?}");
        }
        assert!(c.fusion_increase().abs() < 0.02 && c.local_increase().abs() < 0.02, "{c:?}");
    }
    let table = report.to_table();
    assert_eq!(table.lines().count(), 4);
    assert!(dir.path().join("seed_2/static/manifest.cfg").is_file());
    assert!(dir.path().join("seed_3/dynamic/manifest.cfg").is_file());
}
