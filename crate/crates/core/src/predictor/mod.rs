//! Server-side detection-error predictor: a small MLP mapping a candidate
//! (rate, threshold) and the electrode's template to expected FNR and FPR,
//! the simulator that labels its training data, and the SGD trainer.

mod features;
mod generate;
mod mlp;
mod pipeline;
mod train;

pub use features::{
    filtered_noise_gain, ErrorEstimate, Excursion, NoiseContext, PhaseResponse, PredictorInput, TemplateResponse,
    INPUT_DIM,
};
pub use generate::{
    build_dataset, generate_training_sample, Dataset, GeneratorConfig, ParameterGrid, SampleMeta, TrainingSample,
};
pub use mlp::{gradient_check, Activation, Gradients, Layer, MlpModel, HIDDEN_WIDTHS, OUTPUTS};
pub use pipeline::{cache_paths, load_or_train, run_training, TrainingConfig, TrainingMetrics, TrainingRun};
pub use train::{mean_absolute_error, mean_squared_error, train, Hyperparams, Mae, TrainOutcome};

use std::path::Path;

use thiserror::Error;

use crate::acquisition::AcquisitionError;
use crate::signal::SignalError;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("input has {got} values, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bad topology: {0}")]
    Topology(String),
    #[error("malformed model file: {0}")]
    ModelFormat(String),
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("factor {0} is not supported")]
    InvalidFactor(u32),
    #[error("threshold must be negative, got {0}")]
    NonNegativeThreshold(f64),
    #[error("noise sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("firing rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("template base rate {0} Hz does not match the generator")]
    RateMismatch(f64),
    #[error("template set is empty")]
    EmptyTemplates,
    #[error("parameter grid is empty")]
    EmptyGrid,
    #[error("need at least 10 samples, got {0}")]
    TooFewSamples(usize),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Forward pass for one configuration.
pub fn predict(model: &MlpModel, input: &PredictorInput) -> Result<ErrorEstimate, PredictorError> {
    let y = model.forward(&input.features())?;
    if y.len() != OUTPUTS {
        return Err(PredictorError::DimensionMismatch {
            expected: OUTPUTS,
            got: y.len(),
        });
    }
    Ok(ErrorEstimate {
        fnr: y[0].clamp(0.0, 1.0),
        fpr: y[1].clamp(0.0, 1.0),
    })
}

pub fn predict_batch(model: &MlpModel, inputs: &[PredictorInput]) -> Result<Vec<ErrorEstimate>, PredictorError> {
    inputs.iter().map(|i| predict(model, i)).collect()
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<(), PredictorError> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel, PredictorError> {
    MlpModel::from_bytes(&std::fs::read(path)?)
}
