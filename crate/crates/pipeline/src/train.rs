//! Training loop.

use std::fmt::Write as _;
use std::path::Path;

use fuseloc_core::dataset::Split;
use fuseloc_core::geometry::{format_sig9, perturb_pose};
use fuseloc_core::PerturbationSpec;
use fuseloc_net::checkpoint::{save_checkpoint, CheckpointMeta};
use fuseloc_net::graph::Graph;
use fuseloc_net::params::Binder;
use fuseloc_net::{batch_gradients, Adam, AdamConfig, FrameInput, Model, NetworkConfig, Target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{PipelineError, Result};
use crate::eval::{evaluate, mean};

/// Where training rough poses come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// The benchmark's per-frame rough poses (the same ones evaluation
    /// uses); depth inputs are rendered once and cached.
    Fixed,
    /// A fresh perturbation for every sample drawn.
    Resampled,
}

impl std::str::FromStr for NoiseMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fixed" => Ok(NoiseMode::Fixed),
            "resampled" => Ok(NoiseMode::Resampled),
            other => Err(format!("unknown noise mode {other:?} (fixed, resampled)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Weight of the rotation term in the loss.
    pub lambda: f64,
    pub seed: u64,
    pub noise: NoiseMode,
    /// Validation every this many steps (0: only after the last step).
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            adam: AdamConfig::default(),
            lambda: 1.0,
            seed: 0,
            noise: NoiseMode::Resampled,
            eval_interval: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub val_mean_cm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub model: Model<f32>,
    /// Parameters with the lowest validation error seen.
    pub best: Model<f32>,
    pub best_step: u64,
    pub best_val_cm: f64,
    pub log: Vec<LogEntry>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,grad_norm,val_mean_cm\n");
        for e in &self.log {
            let val = e.val_mean_cm.map(format_sig9).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{val}",
                e.step,
                format_sig9(e.loss),
                format_sig9(e.lr),
                format_sig9(e.grad_norm)
            );
        }
        s
    }
}

/// Refuses a network configuration whose input size differs from the
/// dataset's frames.
pub fn check_config(ds: &Dataset, config: &NetworkConfig) -> Result<()> {
    if (config.height, config.width) != ds.resolution() {
        return Err(PipelineError::Mismatch(format!(
            "network input {}×{} does not match dataset frames {}×{}",
            config.height,
            config.width,
            ds.resolution().0,
            ds.resolution().1
        )));
    }
    Ok(())
}

/// Mean loss over `split` at the benchmark's rough poses (no update).
pub fn split_loss(ds: &Dataset, model: &Model<f32>, split: Split, lambda: f64) -> Result<f64> {
    let mut losses = Vec::new();
    for f in ds.frames(split) {
        let input = ds.input(f.index, &f.rough);
        let target = Target::from_poses(&f.rough, &f.gt);
        let mut g = Graph::new();
        let mut p = Binder::new(model.params());
        let (_, l) = model.build_loss(&mut g, &mut p, &input, &target, lambda)?;
        losses.push(g.value(l).data()[0] as f64);
    }
    Ok(mean(&losses))
}

const RESAMPLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Trains a fresh model seeded by `cfg.seed` on the training split.
pub fn train(ds: &Dataset, config: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_config(ds, config)?;
    let model = Model::<f32>::new(config.clone(), cfg.seed)?;
    train_from(ds, model, cfg)
}

/// Continues training `model`.
pub fn train_from(ds: &Dataset, mut model: Model<f32>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_config(ds, model.config())?;
    assert!(cfg.batch_size > 0, "batch size must be positive");
    let train_idx = ds.split_indices(Split::Train);
    let mut opt = Adam::new(
        AdamConfig {
            total_steps: cfg.steps,
            ..cfg.adam.clone()
        },
        model.params(),
    );
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
    sampler.set_stream(1);
    let resample = PerturbationSpec {
        seed: cfg.seed ^ RESAMPLE_SALT,
        ..*ds.perturbation()
    };
    let cached: Vec<(FrameInput<f32>, Target)> = match cfg.noise {
        NoiseMode::Fixed => train_idx
            .iter()
            .map(|&i| {
                let f = ds.frame(i);
                (ds.input(i, &f.rough), Target::from_poses(&f.rough, &f.gt))
            })
            .collect(),
        NoiseMode::Resampled => Vec::new(),
    };

    let validate = |m: &Model<f32>| evaluate(ds, m, Split::Val).map(|v| v.mean_cm);
    let mut best = model.clone();
    let mut best_step = 0;
    let mut best_val_cm = validate(&model)?;
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| sampler.random_range(0..train_idx.len()))
            .collect();
        let owned: Vec<(FrameInput<f32>, Target)>;
        let batch: Vec<(&FrameInput<f32>, Target)> = match cfg.noise {
            NoiseMode::Fixed => picks.iter().map(|&k| (&cached[k].0, cached[k].1)).collect(),
            NoiseMode::Resampled => {
                owned = picks
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| {
                        let i = train_idx[k];
                        let gt = ds.poses[i];
                        let rough = perturb_pose(&gt, &resample, step * cfg.batch_size as u64 + j as u64);
                        (ds.input(i, &rough), Target::from_poses(&rough, &gt))
                    })
                    .collect();
                owned.iter().map(|(x, t)| (x, *t)).collect()
            }
        };
        let (loss, grads) = batch_gradients(&model, &batch, cfg.lambda).map_err(|e| match e {
            fuseloc_net::NetError::NumericFailure { .. } => PipelineError::Divergence {
                step,
                loss: f64::NAN,
            },
            other => other.into(),
        })?;
        if !loss.is_finite() {
            return Err(PipelineError::Divergence { step, loss });
        }
        let info = opt.update(model.params_mut(), &grads);
        if !model.params().all_finite() {
            return Err(PipelineError::Divergence { step, loss });
        }
        let done = step + 1;
        let val = if done == cfg.steps || (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) {
            let v = validate(&model)?;
            if v < best_val_cm {
                best_val_cm = v;
                best_step = done;
                best = model.clone();
            }
            Some(v)
        } else {
            None
        };
        log.push(LogEntry {
            step: done,
            loss,
            lr: info.lr,
            grad_norm: info.grad_norm,
            val_mean_cm: val,
        });
    }
    Ok(TrainOutcome {
        model,
        best,
        best_step,
        best_val_cm,
        log,
    })
}

/// File names written by [`write_outcome`].
pub const BEST_CHECKPOINT: &str = "model.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Persists the best-validation checkpoint, the final checkpoint and the
/// training log under `out_dir`.
pub fn write_outcome(out: &TrainOutcome, cfg: &TrainConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let last_step = out.log.last().map_or(0, |e| e.step);
    save_checkpoint(
        &out_dir.join(BEST_CHECKPOINT),
        &out.best,
        CheckpointMeta {
            step: out.best_step,
            seed: cfg.seed,
        },
    )?;
    save_checkpoint(
        &out_dir.join(LAST_CHECKPOINT),
        &out.model,
        CheckpointMeta {
            step: last_step,
            seed: cfg.seed,
        },
    )?;
    let log = out_dir.join(TRAIN_LOG);
    std::fs::write(&log, out.log_csv()).map_err(|e| PipelineError::io(&log, e))
}
