//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fuseloc_core::dataset::Split;
use fuseloc_core::projection::render_overlay;
use fuseloc_core::synthworld::{build_benchmark, BenchmarkSpec};
use fuseloc_core::{Clips, Pose};
use fuseloc_net::checkpoint::load_checkpoint;
use fuseloc_net::pretrained::load_vit_safetensors;
use fuseloc_net::{AblationMode, AdamConfig, Model, NetworkConfig};

use crate::data::Dataset;
use crate::eval::{evaluate, Corrector, EvalFrame, IdentityCorrector, OracleCorrector};
use crate::experiments::{ablate, ablation_table, compare_static_dynamic, CompareConfig};
use crate::train::{train_from, write_outcome, NoiseMode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "fuseloc", version, about = "Camera localization against a point-cloud map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    GenData(GenDataArgs),
    /// Render map depth images at ground-truth or rough poses.
    RenderDepth(RenderDepthArgs),
    /// Train a model and write checkpoints plus a training log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and score several ablation modes on one dataset.
    Ablate(AblateArgs),
    /// Compare fusion and local-only degradation on static/dynamic pairs.
    CompareDyn(CompareArgs),
    /// Draw the projected map over the camera images.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Number of moving obstacles.
    #[arg(long, default_value_t = 12)]
    dynamic: usize,
    /// Number of static buildings.
    #[arg(long = "static", default_value_t = 50)]
    n_static: usize,
    #[arg(long, default_value_t = 832)]
    width: usize,
    #[arg(long, default_value_t = 640)]
    height: usize,
    #[arg(long, default_value_t = 90.0)]
    hfov: f64,
    /// Map points per square meter.
    #[arg(long, default_value_t = 5.0)]
    density: f64,
    /// Half-width of the square world, in meters.
    #[arg(long, default_value_t = 60.0)]
    extent: f64,
    /// Rough-pose translation error bound per axis, in meters.
    #[arg(long, default_value_t = 0.60)]
    max_trans: f64,
    #[arg(long, default_value_t = 0.0)]
    max_rot_deg: f64,
    #[arg(long, default_value_t = 0.5)]
    near: f64,
    #[arg(long, default_value_t = 100.0)]
    far: f64,
}

impl BenchArgs {
    fn spec(&self, seed: u64) -> BenchmarkSpec {
        BenchmarkSpec {
            seed,
            n_frames: self.frames,
            n_dynamic: self.dynamic,
            n_static: self.n_static,
            extent: self.extent,
            width: self.width,
            height: self.height,
            hfov_deg: self.hfov,
            density: self.density,
            max_trans: self.max_trans,
            max_rot_deg: self.max_rot_deg,
            clips: Clips {
                near: self.near,
                far: self.far,
            },
            ..BenchmarkSpec::default()
        }
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    bench: BenchArgs,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// Manifest file or dataset directory.
    #[arg(long)]
    manifest: PathBuf,
    /// Replaces the map by voxel centroids of this size (meters).
    #[arg(long)]
    voxel: Option<f64>,
}

impl DatasetArgs {
    fn open(&self, seed: Option<u64>) -> anyhow::Result<Dataset> {
        let mut ds = Dataset::open(&self.manifest).with_context(|| format!("loading {}", self.manifest.display()))?;
        if let Some(v) = self.voxel {
            ds = ds.with_voxel(v)?;
        }
        if let Some(s) = seed {
            ds = ds.with_perturbation_seed(s);
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Eval,
    All,
}

impl SplitArg {
    fn indices(self, ds: &Dataset) -> Vec<usize> {
        match self {
            SplitArg::Train => ds.split_indices(Split::Train),
            SplitArg::Val => ds.split_indices(Split::Val),
            SplitArg::Eval => ds.split_indices(Split::Eval),
            SplitArg::All => (0..ds.len()).collect(),
        }
    }

    fn split(self) -> anyhow::Result<Split> {
        Ok(match self {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Eval => Split::Eval,
            SplitArg::All => bail!("--split all is not a scoring split"),
        })
    }
}

#[derive(Debug, Args)]
struct RenderDepthArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Render at the rough pose instead of ground truth.
    #[arg(long)]
    rough: bool,
    /// Overrides the dataset's rough-pose seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Reduced,
    Reference,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "reduced")]
    preset: Preset,
    /// ViT input side; the resize target becomes twice this minus one.
    #[arg(long)]
    vit_input: Option<usize>,
    /// Pre-trained ViT weights (.safetensors).
    #[arg(long)]
    vit_weights: Option<PathBuf>,
}

impl ModelArgs {
    fn config(&self, (h, w): (usize, usize), mode: AblationMode) -> NetworkConfig {
        let mut c = match self.preset {
            Preset::Reduced => NetworkConfig::reduced(h, w),
            Preset::Reference => NetworkConfig::reference(h, w),
        };
        if let Some(n) = self.vit_input {
            c = c.with_vit_input(n);
        }
        c.with_mode(mode)
    }

    fn init(&self, config: NetworkConfig, seed: u64) -> anyhow::Result<Model<f32>> {
        let mut m = Model::new(config, seed)?;
        if let Some(p) = &self.vit_weights {
            if m.config().ablation_mode != AblationMode::LocalOnly {
                load_vit_safetensors(&mut m, p).with_context(|| format!("loading {}", p.display()))?;
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Weight of the rotation loss term.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Rough poses while training: fixed (the benchmark's) or resampled.
    #[arg(long, default_value = "resampled")]
    noise: NoiseMode,
    /// Validate every N steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    eval_interval: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            lambda: self.lambda,
            seed: self.seed,
            noise: self.noise,
            eval_interval: self.eval_interval,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "fusion")]
    mode: AblationMode,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Stub {
    Identity,
    Oracle,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, required_unless_present = "stub", conflicts_with = "stub")]
    checkpoint: Option<PathBuf>,
    /// Score a diagnostic stub instead of a checkpoint.
    #[arg(long, value_enum)]
    stub: Option<Stub>,
    #[arg(long, value_enum, default_value = "eval")]
    split: SplitArg,
    /// Per-frame errors as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Overrides the dataset's rough-pose seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated modes.
    #[arg(long, value_delimiter = ',', default_value = "rgb_resize,rgb_resize_conv,rgbd_resize_conv,fusion")]
    modes: Vec<AblationMode>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated benchmark seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[command(flatten)]
    bench: BenchArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Debug, Args)]
struct OverlayArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
    /// Project at the pose this checkpoint predicts from the rough pose.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Project at the rough pose (ignored with --checkpoint).
    #[arg(long)]
    rough: bool,
    #[arg(long, value_enum, default_value = "eval")]
    split: SplitArg,
    /// Overrides the dataset's rough-pose seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn create_dir(p: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_file(p: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let m = build_benchmark(&a.bench.spec(a.seed), &a.out)?;
            writeln!(out, "wrote {} frames to {}", m.splits.eval.end() + 1, a.out.display())?;
        }
        Command::RenderDepth(a) => {
            let ds = a.data.open(a.seed)?;
            create_dir(&a.out)?;
            let idx = a.split.indices(&ds);
            for &i in &idx {
                let pose = if a.rough { ds.rough_pose(i) } else { ds.poses[i] };
                let p = a.out.join(format!("{i:06}.png"));
                ds.render_depth(&pose).save_png_mm(&p)?;
            }
            writeln!(out, "wrote {} depth images to {}", idx.len(), a.out.display())?;
        }
        Command::Train(a) => {
            let ds = a.data.open(None)?;
            let cfg = a.opts.config();
            let model = a.model.init(a.model.config(ds.resolution(), a.mode), cfg.seed)?;
            let outcome = train_from(&ds, model, &cfg)?;
            write_outcome(&outcome, &cfg, &a.out)?;
            writeln!(
                out,
                "best_step={} val_mean_cm={}",
                outcome.best_step,
                fuseloc_core::geometry::format_sig9(outcome.best_val_cm)
            )?;
        }
        Command::Eval(a) => {
            let ds = a.data.open(a.seed)?;
            let split = a.split.split()?;
            let metrics = match (&a.checkpoint, a.stub) {
                (Some(c), _) => {
                    let (model, _) = load_checkpoint(c).with_context(|| format!("loading {}", c.display()))?;
                    evaluate(&ds, &model, split)?
                }
                (None, Some(Stub::Identity)) => evaluate(&ds, &IdentityCorrector, split)?,
                (None, Some(Stub::Oracle)) => evaluate(&ds, &OracleCorrector, split)?,
                (None, None) => bail!("either --checkpoint or --stub is required"),
            };
            if let Some(p) = &a.csv {
                metrics.write_csv(p)?;
            }
            writeln!(out, "{}", metrics.summary_line())?;
        }
        Command::Ablate(a) => {
            let ds = a.data.open(None)?;
            if a.model.vit_weights.is_some() {
                bail!("ablate trains from scratch; --vit-weights is only supported by train");
            }
            let rows = ablate(&ds, &a.model.config(ds.resolution(), AblationMode::Fusion), &a.opts.config(), &a.modes)?;
            let table = ablation_table(&rows);
            create_dir(&a.out)?;
            write_file(&a.out.join("ablation.csv"), &table)?;
            write!(out, "{table}")?;
        }
        Command::CompareDyn(a) => {
            if a.model.vit_weights.is_some() {
                bail!("compare-dyn trains from scratch; --vit-weights is only supported by train");
            }
            let bench = a.bench.spec(0);
            let net = a.model.config((bench.height, bench.width), AblationMode::Fusion);
            create_dir(&a.out)?;
            let report = compare_static_dynamic(
                &a.seeds,
                &CompareConfig {
                    bench,
                    net,
                    train: a.opts.config(),
                    work_dir: a.out.clone(),
                },
            )?;
            let table = report.to_table();
            write_file(&a.out.join("compare_dyn.csv"), &table)?;
            write!(out, "{table}")?;
            writeln!(out, "trend_holds={}", report.trend_holds())?;
        }
        Command::Overlay(a) => {
            let ds = a.data.open(a.seed)?;
            let model = match &a.checkpoint {
                Some(c) => Some(load_checkpoint(c).with_context(|| format!("loading {}", c.display()))?.0),
                None => None,
            };
            create_dir(&a.out)?;
            let idx = a.split.indices(&ds);
            for &i in &idx {
                let f = ds.frame(i);
                let pose: Pose = match &model {
                    Some(m) => {
                        let input = ds.input(i, &f.rough);
                        m.correct(&EvalFrame {
                            index: i,
                            input: &input,
                            rough: f.rough,
                            gt: f.gt,
                        })?
                    }
                    None if a.rough => f.rough,
                    None => f.gt,
                };
                let img = render_overlay(f.color, &ds.map, &pose, &ds.intrinsics, ds.clips());
                let p = a.out.join(format!("{i:06}_overlay.png"));
                img.save(&p).with_context(|| format!("writing {}", p.display()))?;
            }
            writeln!(out, "wrote {} overlays to {}", idx.len(), a.out.display())?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 2 on usage errors, 1 on failures.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
