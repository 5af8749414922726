//! Dataset ingestion, preprocessing recipes, training, evaluation and the
//! `fuseloc` command line.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod preprocess;
pub mod train;

pub use data::Dataset;
pub use error::{PipelineError, Result};
pub use eval::{evaluate, Corrector, IdentityCorrector, Metrics, OracleCorrector};
pub use train::{train, NoiseMode, TrainConfig, TrainOutcome};
