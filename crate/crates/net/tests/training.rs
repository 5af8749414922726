use fuseloc_core::geometry::quat_normalize;
use fuseloc_core::Pose;
use fuseloc_net::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use fuseloc_net::{batch_gradients, Adam, AdamConfig, FrameInput, Model, NetworkConfig, Target, Tensor};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn input(h: usize, w: usize, seed: u64) -> FrameInput<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |c: usize| Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect());
    FrameInput { color: t(3), depth: t(1) }
}

fn config() -> NetworkConfig {
    NetworkConfig::reduced(32, 48).with_vit_input(64)
}

fn train(model: &mut Model<f32>, data: &[(FrameInput<f32>, Target)], steps: u64) -> Vec<f64> {
    let mut opt = Adam::new(
        AdamConfig {
            lr: 2e-3,
            total_steps: steps,
            ..AdamConfig::default()
        },
        model.params(),
    );
    (0..steps)
        .map(|_| {
            let batch: Vec<_> = data.iter().map(|(x, t)| (x, *t)).collect();
            let (loss, grads) = batch_gradients(model, &batch, 1.0).unwrap();
            opt.update(model.params_mut(), &grads);
            loss
        })
        .collect()
}

fn dataset() -> Vec<(FrameInput<f32>, Target)> {
    (0..3)
        .map(|i| {
            let t = [0.3 - 0.2 * i as f64, 0.1 * i as f64, -0.25];
            let q = quat_normalize([1.0, 0.02 * i as f64, -0.01, 0.03]).unwrap();
            (input(32, 48, 40 + i), Target { t, q })
        })
        .collect()
}

#[test]
fn identical_seeds_give_bit_identical_outputs() {
    let x = input(32, 48, 1);
    let rough = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
    let a = Model::<f32>::new(config(), 77).unwrap().forward(&x, &rough).unwrap();
    let b = Model::<f32>::new(config(), 77).unwrap().forward(&x, &rough).unwrap();
    assert_eq!(a.features, b.features);
    assert_eq!(a.t.map(f64::to_bits), b.t.map(f64::to_bits));
    assert_eq!(a.q.map(f64::to_bits), b.q.map(f64::to_bits));
    let c = Model::<f32>::new(config(), 78).unwrap().forward(&x, &rough).unwrap();
    assert_ne!(a.features.f, c.features.f);
}

#[test]
fn zero_correction_leaves_rough_pose() {
    let m = Model::<f32>::new(config(), 2).unwrap();
    let rough = Pose::new(Vector3::new(4.0, -1.0, 2.0), [0.9, 0.1, 0.3, -0.2]).unwrap();
    let out = m
        .regress_pose(&Tensor::zeros(&[64]), &Tensor::zeros(&[96]), &rough)
        .unwrap();
    let norm: f64 = out.q.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
    assert_eq!(Pose::identity().compose(&rough), rough);
    let exact = rough.compose(&Pose::identity());
    assert_eq!(exact, rough);
    assert!(m.regress_pose(&Tensor::zeros(&[63]), &Tensor::zeros(&[96]), &rough).is_err());
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let data = dataset();
    let mut a = Model::<f32>::new(config(), 5).unwrap();
    let mut b = Model::<f32>::new(config(), 5).unwrap();
    let la = train(&mut a, &data, 60);
    let lb = train(&mut b, &data, 60);
    assert_eq!(la, lb);
    assert_eq!(a.params(), b.params());
    assert!(la[59] < 0.2 * la[0], "loss {} -> {}", la[0], la[59]);
}

#[test]
fn global_feature_feeds_the_trained_heads() {
    let data = dataset();
    let mut m = Model::<f32>::new(config(), 6).unwrap();
    train(&mut m, &data, 30);
    let rough = Pose::identity();
    let full = m.forward(&data[0].0, &rough).unwrap();
    let f = &full.features;
    let zeroed = m.regress_pose(&f.f_local, &Tensor::zeros(&[96]), &rough).unwrap();
    let same = m.regress_pose(&f.f_local, &f.f_global, &rough).unwrap();
    assert_eq!(same.t, full.t);
    assert_ne!(zeroed.t, full.t);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut m = Model::<f32>::new(config(), 8).unwrap();
    train(&mut m, &dataset(), 3);
    let meta = CheckpointMeta { step: 3, seed: 8 };
    save_checkpoint(&path, &m, meta).unwrap();
    let (back, meta2) = load_checkpoint(&path).unwrap();
    assert_eq!(meta2, meta);
    for ((_, _, a), (_, _, b)) in m.params().iter().zip(back.params().iter()) {
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    let x = input(32, 48, 9);
    let pa = m.forward(&x, &Pose::identity()).unwrap();
    let pb = back.forward(&x, &Pose::identity()).unwrap();
    assert_eq!(pa.features, pb.features);
    assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}
