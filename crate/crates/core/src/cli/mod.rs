//! Experiment runner: JSON configs, the artifact layout and one function per subcommand.
//!
//! Pipeline order: `make-dataset`, `invert`, `gen-views`, `pretrain`, then any of
//! `probe`, `knn`, `mi` and `plot`. Each stage reads its inputs from the output
//! directory and fails with [`crate::Error::MissingArtifact`] naming the stage
//! to run first.

mod commands;
mod config;
mod plot;
mod sweep;

pub use commands::{
    gen_views_cmd, invert_cmd, knn_cmd, make_dataset_cmd, mi_cmd, plot_cmd, pool_pixels, pretrain_cmd, probe_cmd,
    read_results, run_name, Context, Layout, Outcome, ResultFile,
};
pub use config::{Calibration, EvalConfig, ExperimentConfig, GeneratedSource, MiSpace, ModelConfig, ModelSeeds, ViewgenConfig};
pub use plot::{line_chart, Curve};
pub use sweep::{cell_config, read_results as read_sweep_results, run_sweep, Axis, GridSpec, SeedPolicy, Stage, SweepRow};
