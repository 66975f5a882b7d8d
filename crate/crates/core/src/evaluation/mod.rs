//! Ground truth, event matching, detection-error and compression metrics,
//! error injection and the scheme comparison harness.

mod compare;
mod metrics;
mod truth;

pub use compare::{
    detect_channels, detect_signals, evaluate_config, run_comparison, ComparisonReport, ComparisonSettings, ReportRow,
    Scheme,
};
pub use metrics::{compression_ratio, inject_errors, CrBasis, RAW_SAMPLE_BITS};
pub use truth::{
    match_events, project_ground_truth, DetectionReport, ElectrodeGroundTruth, NeuronSpikeTrain, DEFAULT_WINDOW_S,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("compression ratio undefined: zero {0}")]
    ZeroDenominator(&'static str),
    #[error("{name} must lie in [0, 1], got {value}")]
    RateOutOfRange { name: &'static str, value: f64 },
    #[error("no schemes selected; choose from raw, adaptive, uniform, dct, cs")]
    NoSchemes,
    #[error(transparent)]
    Optimizer(#[from] crate::optimizer::OptimizerError),
    #[error(transparent)]
    Acquisition(#[from] crate::acquisition::AcquisitionError),
    #[error(transparent)]
    Signal(#[from] crate::signal::SignalError),
    #[error(transparent)]
    Baseline(#[from] crate::baselines::BaselineError),
}
