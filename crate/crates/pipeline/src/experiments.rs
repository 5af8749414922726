//! Multi-run experiments: mode ablation and the static/dynamic comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fuseloc_core::dataset::Split;
use fuseloc_core::geometry::format_sig9;
use fuseloc_core::synthworld::{build_benchmark, BenchmarkSpec};
use fuseloc_net::{AblationMode, NetworkConfig};

use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{evaluate, median, Metrics};
use crate::train::{train, TrainConfig};

/// One ablation row: a mode trained and scored on the same dataset.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub metrics: Metrics,
}

/// Trains every mode in `modes` with identical settings and scores it on
/// the evaluation split.
pub fn ablate(ds: &Dataset, net: &NetworkConfig, cfg: &TrainConfig, modes: &[AblationMode]) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|&mode| {
            let out = train(ds, &net.clone().with_mode(mode), cfg)?;
            Ok(AblationRow {
                mode,
                metrics: evaluate(ds, &out.best, Split::Eval)?,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("mode,mean_cm,median_cm,n\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.mode,
            format_sig9(r.metrics.mean_cm),
            format_sig9(r.metrics.median_cm),
            r.metrics.count
        );
    }
    s
}

/// Settings shared by every seed of a static/dynamic comparison.
#[derive(Debug, Clone)]
pub struct CompareConfig {
    /// Template for the dynamic benchmark; the seed is replaced per run and
    /// the static twin uses `n_dynamic = 0`.
    pub bench: BenchmarkSpec,
    pub net: NetworkConfig,
    pub train: TrainConfig,
    /// Benchmarks are written under `<work_dir>/seed_<s>/{static,dynamic}`.
    pub work_dir: PathBuf,
}

/// Eval-split mean errors of one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedCells {
    pub seed: u64,
    pub fusion_static: f64,
    pub fusion_dynamic: f64,
    pub local_static: f64,
    pub local_dynamic: f64,
}

fn rel(static_cm: f64, dynamic_cm: f64) -> f64 {
    (dynamic_cm - static_cm) / static_cm
}

impl SeedCells {
    /// Relative error increase from static to dynamic for fusion mode.
    pub fn fusion_increase(&self) -> f64 {
        rel(self.fusion_static, self.fusion_dynamic)
    }

    pub fn local_increase(&self) -> f64 {
        rel(self.local_static, self.local_dynamic)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub seeds: Vec<SeedCells>,
}

impl CompareReport {
    pub fn median_fusion_increase(&self) -> f64 {
        median(&self.seeds.iter().map(SeedCells::fusion_increase).collect::<Vec<_>>())
    }

    pub fn median_local_increase(&self) -> f64 {
        median(&self.seeds.iter().map(SeedCells::local_increase).collect::<Vec<_>>())
    }

    /// Median over seeds of each cell, in `fusion_static, fusion_dynamic,
    /// local_static, local_dynamic` order.
    pub fn median_cells(&self) -> [f64; 4] {
        let col = |f: fn(&SeedCells) -> f64| median(&self.seeds.iter().map(f).collect::<Vec<_>>());
        [
            col(|c| c.fusion_static),
            col(|c| c.fusion_dynamic),
            col(|c| c.local_static),
            col(|c| c.local_dynamic),
        ]
    }

    /// Fusion degrades no more than local-only from static to dynamic.
    pub fn trend_holds(&self) -> bool {
        self.median_fusion_increase() <= self.median_local_increase()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from(
            "seed,fusion_static_cm,fusion_dynamic_cm,local_static_cm,local_dynamic_cm,fusion_increase,local_increase\n",
        );
        let f = |v: f64| format_sig9(v);
        for c in &self.seeds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.seed,
                f(c.fusion_static),
                f(c.fusion_dynamic),
                f(c.local_static),
                f(c.local_dynamic),
                f(c.fusion_increase()),
                f(c.local_increase())
            );
        }
        let m = self.median_cells();
        let _ = writeln!(
            s,
            "median,{},{},{},{},{},{}",
            f(m[0]),
            f(m[1]),
            f(m[2]),
            f(m[3]),
            f(self.median_fusion_increase()),
            f(self.median_local_increase())
        );
        s
    }
}

/// Writes the static and dynamic benchmarks of `seed`. Both share static
/// geometry, map, trajectory and rough poses; only the obstacles differ.
pub fn build_pair(bench: &BenchmarkSpec, seed: u64, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let dynamic = BenchmarkSpec {
        seed,
        ..bench.clone()
    };
    let stat = BenchmarkSpec {
        n_dynamic: 0,
        ..dynamic.clone()
    };
    let (ps, pd) = (dir.join("static"), dir.join("dynamic"));
    build_benchmark(&stat, &ps)?;
    build_benchmark(&dynamic, &pd)?;
    Ok((ps, pd))
}

/// For every seed: builds the benchmark pair, trains fusion and local-only
/// models on the static benchmark and scores each on both eval splits.
pub fn compare_static_dynamic(seeds: &[u64], cfg: &CompareConfig) -> Result<CompareReport> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (ps, pd) = build_pair(&cfg.bench, seed, &cfg.work_dir.join(format!("seed_{seed}")))?;
        let stat = Dataset::open(&ps)?;
        let dynamic = Dataset::open(&pd)?;
        let train_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let score = |mode: AblationMode| -> Result<(f64, f64)> {
            let model = train(&stat, &cfg.net.clone().with_mode(mode), &train_cfg)?.best;
            Ok((
                evaluate(&stat, &model, Split::Eval)?.mean_cm,
                evaluate(&dynamic, &model, Split::Eval)?.mean_cm,
            ))
        };
        let (fusion_static, fusion_dynamic) = score(AblationMode::Fusion)?;
        let (local_static, local_dynamic) = score(AblationMode::LocalOnly)?;
        out.push(SeedCells {
            seed,
            fusion_static,
            fusion_dynamic,
            local_static,
            local_dynamic,
        });
    }
    Ok(CompareReport { seeds: out })
}
