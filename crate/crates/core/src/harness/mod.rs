//! Episodic evaluation, ablation grids, trajectory export and run configuration.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod trajectory;

pub use ablation::{run_ablation, write_ablation_csv, AblationCell, AblationGrid, AblationInput, MethodSpec, TrainVariant};
pub use config::{DatasetSource, ModelSpec, RunConfig};
pub use eval::{
    config_warnings, embed_feature_set, episode_stream, evaluate, fingerprint, mean_and_ci95, run_episode,
    score_predictions, EpisodeRun, EvalOptions, EvalReport,
};
pub use trajectory::{export_trajectories, read_trajectories, Trajectories};
