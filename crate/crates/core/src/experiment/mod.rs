//! End-to-end experiment pipeline: datasets, training, tuning studies and reports.

mod config;
mod report;
mod run;

pub use config::{build_config, read_config_file, DataConfig, ExperimentConfig, Profile, TuneConfig};
pub use report::{
    cells_csv, curve, history_csv, learning_curve_svg, mixture_csv, ood_csv, parse_history_csv, scatter_svg,
    summary_csv, tag, write_svg, write_tagged, HistoryRow, CSV_SCHEMA_VERSION, OPTIMAL_RETURN,
};
pub use run::{
    aggregate, gen_data, load_model, load_prompt_sets, load_training_tasks, mean_std, model_js, model_name,
    parallel_map, ring_tasks, run_cell, run_mixture, run_ood, run_table, spatial_shift, study_j, summarize,
    train_models, Aggregate, CellKey, CellResult, Layout, Method, MixtureLevel, OodReport, Pool, SpatialShift,
    TableRequest, TaskEvaluator, MIXTURE_METHODS, OOD_METHODS,
};
