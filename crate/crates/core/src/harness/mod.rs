//! Pipeline orchestration, closed-loop evaluation, metrics, ablations and
//! reports.

mod ablation;
mod gradcheck;
mod metrics;
mod pipeline;
mod report;
mod rollout;

pub use gradcheck::{grad_check, grad_check_graph, GradCheckConfig, GradCheckReport, GradEntry};
pub use metrics::{eval_metrics, metrics_from_pairs, Metrics, PairResult};
pub use rollout::{
    rollout, rollout_pair, rollout_scene, rollout_scenes, ChunkPolicy, ExpertReplay, PolicyStack, RolloutConfig,
    RolloutRecord, WorldView, ZeroPolicy,
};
pub use pipeline::{evaluate_stack, train_variant, PipelineConfig, TrainedRun, Variant};
pub use ablation::{mean_std, run_ablation_matrix, AblationReport, RunConfig, RunRecord, SummaryRow};
pub use report::{emit_report, load_report};
