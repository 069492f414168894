//! Training, evaluation, sweeps and report drivers.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod model;
pub mod reports;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use metrics::{compute_metrics, CategoryMetrics, MetricsReport};
pub use model::{BatchOutput, LossBreakdown, LossTerms, Model, Noise, SampleEncoding, SampleOutput, VatState};
pub use reports::{
    ablate, expert_report, expert_rows_to_csv, export_embeddings, rows_to_csv, run_seed, sweep_beta, sweep_experts,
    ExpertRow, RunResult, SweepRow,
};
pub use train::{evaluate, evaluate_routed, sample_embedding, train, EpochLog, Evaluation, TrainOutcome};
