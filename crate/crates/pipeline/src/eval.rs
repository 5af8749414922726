//! Localization metrics and the evaluation loop.

use std::fmt::Write as _;
use std::path::Path;

use fuseloc_core::dataset::Split;
use fuseloc_core::geometry::{format_sig9, translation_error_cm};
use fuseloc_core::Pose;
use fuseloc_net::{FrameInput, Model};

use crate::data::Dataset;
use crate::error::{PipelineError, Result};

/// Translation errors of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mean_cm: f64,
    pub median_cm: f64,
    pub count: usize,
    /// Frame indices, in evaluation order.
    pub frames: Vec<usize>,
    /// Per-frame translation error in centimeters, aligned with `frames`.
    pub per_frame_cm: Vec<f64>,
}

/// Arithmetic mean; `NaN` for an empty list.
pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median, averaging the two central values for even counts; `NaN` for an
/// empty list.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

impl Metrics {
    pub fn from_errors(frames: Vec<usize>, per_frame_cm: Vec<f64>) -> Self {
        assert_eq!(frames.len(), per_frame_cm.len(), "one error per frame");
        Self {
            mean_cm: mean(&per_frame_cm),
            median_cm: median(&per_frame_cm),
            count: per_frame_cm.len(),
            frames,
            per_frame_cm,
        }
    }

    /// `mean_cm=<x> median_cm=<y> n=<k>`.
    pub fn summary_line(&self) -> String {
        format!(
            "mean_cm={} median_cm={} n={}",
            format_sig9(self.mean_cm),
            format_sig9(self.median_cm),
            self.count
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_id,error_cm\n");
        for (f, e) in self.frames.iter().zip(&self.per_frame_cm) {
            let _ = writeln!(s, "{f},{}", format_sig9(*e));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| PipelineError::io(path, e))
    }
}

/// What a pose corrector sees for one frame. `gt` is exposed for
/// diagnostic stubs only; learned models must ignore it.
pub struct EvalFrame<'a> {
    pub index: usize,
    pub input: &'a FrameInput<f32>,
    pub rough: Pose,
    pub gt: Pose,
}

/// Anything that turns a rough pose into a refined absolute pose.
pub trait Corrector {
    /// Network resolution `(height, width)` the corrector requires, if any.
    fn resolution(&self) -> Option<(usize, usize)> {
        None
    }

    fn correct(&self, frame: &EvalFrame) -> Result<Pose>;
}

impl Corrector for Model<f32> {
    fn resolution(&self) -> Option<(usize, usize)> {
        Some((self.config().height, self.config().width))
    }

    fn correct(&self, frame: &EvalFrame) -> Result<Pose> {
        Ok(self.forward(frame.input, &frame.rough)?.absolute)
    }
}

/// Predicts a zero correction.
pub struct IdentityCorrector;

impl Corrector for IdentityCorrector {
    fn correct(&self, frame: &EvalFrame) -> Result<Pose> {
        Ok(frame.rough)
    }
}

/// Predicts the exact correction `rough⁻¹ ∘ gt`. The composed pose is
/// returned as `gt` itself so the score carries no round-off.
pub struct OracleCorrector;

impl Corrector for OracleCorrector {
    fn correct(&self, frame: &EvalFrame) -> Result<Pose> {
        Ok(frame.gt)
    }
}

/// Refuses a corrector whose resolution differs from the dataset's.
pub fn check_resolution(ds: &Dataset, c: &dyn Corrector) -> Result<()> {
    match c.resolution() {
        Some(r) if r != ds.resolution() => Err(PipelineError::Mismatch(format!(
            "model expects {}×{} inputs, dataset frames are {}×{}",
            r.0,
            r.1,
            ds.resolution().0,
            ds.resolution().1
        ))),
        _ => Ok(()),
    }
}

/// Runs `corrector` on every frame of `split` with the benchmark's rough
/// poses and scores the translation error against ground truth.
pub fn evaluate(ds: &Dataset, corrector: &dyn Corrector, split: Split) -> Result<Metrics> {
    check_resolution(ds, corrector)?;
    let mut frames = Vec::new();
    let mut errors = Vec::new();
    for f in ds.frames(split) {
        let input = ds.input(f.index, &f.rough);
        let est = corrector.correct(&EvalFrame {
            index: f.index,
            input: &input,
            rough: f.rough,
            gt: f.gt,
        })?;
        frames.push(f.index);
        errors.push(translation_error_cm(&est, &f.gt));
    }
    Ok(Metrics::from_errors(frames, errors))
}
