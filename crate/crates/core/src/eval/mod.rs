//! Offline and online metrics, experiment configuration and the staged
//! pipeline that ties the other modules together.

mod config;
mod metrics;
mod pipeline;

pub use config::{DataConfig, DataSource, EvalConfig, ExperimentConfig, SimulatorConfig};
pub use metrics::{arp, evaluate_offline, mrr_at_k, online_report, recall_at_k, MetricsReport, ScopeMetrics};
pub use pipeline::{
    read_report, run_pipeline, Pipeline, Stage, StageReport, COUNTERFACTUALS, DATASET, DIFFUSION_CKPT, GUIDANCE,
    OBSERVED, SCM_CKPT, SR_BASELINE, SR_DCASR, TEST, TRAIN, VALID,
};
