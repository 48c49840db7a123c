//! Training, experiments, ablations and figure output.

mod config;
mod experiment;
mod render;
mod train;

pub use config::{DatasetConfig, ExperimentConfig, OutputConfig};
pub use experiment::{
    ablate, ablate_settings, default_ablation_settings, generate, median, run_experiment, run_fcls,
    write_baseline_outputs, write_model_outputs, AblationRow, AblationSetting, AblationTable, BaselineResult, EndmemberSource,
    ExperimentReport,
};
pub use render::{render_endmembers, render_maps};
pub use train::{
    loss_curve_csv, resolve_arch, train, write_loss_curve, LossPoint, RunRecord, TrainConfig, TrainedModel,
    LOSS_CURVE_HEADER,
};
