//! End-to-end pipeline: configuration, streaming and cached evaluation,
//! λ tuning, method composition, ablations and throughput benchmarks.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod report;
pub mod select;

pub use ablation::{run_ablation_grid, AblationCell, MaskKind, WeightKind};
pub use bench::{bench_speed, BenchRow};
pub use config::{IndexKind, PipelineConfig};
pub use eval::{
    eval_stream, lambda_grid, tune_lambda, BaseModel, EvalReport, LambdaTuning, LmRecord,
    Retriever, TokenProbs, Weighting,
};
pub use pipeline::{Mode, Model, Splits, Variant, Workspace};
pub use select::{select_settings, Selection};
