use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::INPUT_DIM;
use super::generate::TrainingSample;
use super::mlp::MlpModel;
use super::PredictorError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of the train split held out for early stopping.
    pub validation_fraction: f64,
    /// Classical momentum coefficient; 0 gives plain SGD.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.03,
            batch_size: 32,
            max_epochs: 3000,
            patience: 300,
            validation_fraction: 0.1,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), PredictorError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && (0.0..1.0).contains(&self.validation_fraction)
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(PredictorError::Hyperparams(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Epoch whose parameters were returned (0 = the initial model).
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_validation_loss: f64,
    /// `(train_loss, validation_loss)` per epoch, starting with the initial model.
    pub history: Vec<(f64, f64)>,
}

/// Mean absolute error of the model's two outputs over `samples`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mae {
    pub fnr: f64,
    pub fpr: f64,
}

pub(crate) fn sample_vectors(samples: &[TrainingSample]) -> Vec<(Vec<f64>, Vec<f64>)> {
    samples
        .iter()
        .map(|s| (s.input.features(), vec![s.target.fnr, s.target.fpr]))
        .collect()
}

fn as_batch(v: &[(Vec<f64>, Vec<f64>)]) -> Vec<(&[f64], &[f64])> {
    v.iter().map(|(x, t)| (x.as_slice(), t.as_slice())).collect()
}

/// Mini-batch SGD on mean squared error with early stopping. The validation
/// slice is taken from the train split after a seeded shuffle; the model with
/// the lowest validation loss (the initial model included) is returned.
pub fn train(samples: &[TrainingSample], hp: &Hyperparams) -> Result<TrainOutcome, PredictorError> {
    hp.validate()?;
    if samples.is_empty() {
        return Err(PredictorError::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut data = sample_vectors(samples);
    data.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * hp.validation_fraction).round() as usize).min(samples.len() - 1);
    let (val, fit) = data.split_at(n_val);
    // With no room for a validation slice, early stopping watches the fit set.
    let val = if val.is_empty() { fit } else { val };
    let val_batch = as_batch(val);
    let fit_batch = as_batch(fit);

    let mut model = MlpModel::predictor(INPUT_DIM, hp.seed);
    let mut velocity = model.zero_gradients();
    let mut best = model.clone();
    let mut best_loss = model.loss(&val_batch)?;
    let mut best_epoch = 0;
    let mut history = vec![(model.loss(&fit_batch)?, best_loss)];
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut epochs_run = 0;
    for epoch in 1..=hp.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<(&[f64], &[f64])> = chunk.iter().map(|&i| fit_batch[i]).collect();
            let (loss, grads) = model.loss_and_gradient(&batch)?;
            if !loss.is_finite() {
                return Err(PredictorError::Diverged { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            if hp.momentum > 0.0 {
                model.apply_update(&grads, hp.learning_rate, Some((&mut velocity, hp.momentum)));
            } else {
                model.apply_update(&grads, hp.learning_rate, None);
            }
        }
        let val_loss = model.loss(&val_batch)?;
        if !val_loss.is_finite() || !model.is_finite() {
            return Err(PredictorError::Diverged { epoch });
        }
        history.push((epoch_loss / fit.len() as f64, val_loss));
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= hp.patience {
            break;
        }
    }
    log::info!("training stopped after {epochs_run} epochs; best epoch {best_epoch}, validation MSE {best_loss:.6}");
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        epochs_run,
        best_validation_loss: best_loss,
        history,
    })
}

pub fn mean_absolute_error(model: &MlpModel, samples: &[TrainingSample]) -> Result<Mae, PredictorError> {
    if samples.is_empty() {
        return Ok(Mae::default());
    }
    let mut mae = Mae::default();
    for s in samples {
        let y = model.forward(&s.input.features())?;
        mae.fnr += (y[0] - s.target.fnr).abs();
        mae.fpr += (y[1] - s.target.fpr).abs();
    }
    let n = samples.len() as f64;
    mae.fnr /= n;
    mae.fpr /= n;
    Ok(mae)
}

/// Mean squared error of `model` over `samples`, same normalization as training.
pub fn mean_squared_error(model: &MlpModel, samples: &[TrainingSample]) -> Result<f64, PredictorError> {
    let v = sample_vectors(samples);
    model.loss(&as_batch(&v))
}
