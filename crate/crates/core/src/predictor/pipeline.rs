use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::INPUT_DIM;
use super::generate::{build_dataset, Dataset, GeneratorConfig, ParameterGrid};
use super::mlp::MlpModel;
use super::train::{mean_absolute_error, train, Hyperparams, Mae};
use super::{load_model, save_model, PredictorError};
use crate::exec::Execution;
use crate::signal::SpikeTemplate;
use crate::synth::template_bank;

/// Everything that determines a trained predictor: template bank, dataset
/// draw, simulator settings and optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_templates: usize,
    pub amplitude_range_uv: (f64, f64),
    pub template_seed: u64,
    pub n_samples: usize,
    pub dataset_seed: u64,
    pub grid: ParameterGrid,
    pub generator: GeneratorConfig,
    pub hyperparams: Hyperparams,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_templates: 256,
            amplitude_range_uv: (20.0, 400.0),
            template_seed: 1,
            n_samples: 2000,
            dataset_seed: 7,
            grid: ParameterGrid::default(),
            generator: GeneratorConfig::default(),
            hyperparams: Hyperparams::default(),
        }
    }
}

impl TrainingConfig {
    pub fn templates(&self) -> Result<Vec<SpikeTemplate>, PredictorError> {
        let (lo, hi) = self.amplitude_range_uv;
        if self.n_templates == 0 {
            return Err(PredictorError::EmptyTemplates);
        }
        if !(lo > 0.0 && hi >= lo) {
            return Err(PredictorError::Hyperparams(format!("amplitude range {lo}..{hi}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.template_seed);
        Ok(template_bank(
            self.n_templates,
            self.amplitude_range_uv,
            self.generator.base_rate_hz,
            &mut rng,
        ))
    }

    /// Stable identifier of this configuration, used to name cached models.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h = crc32fast::Hasher::new();
        h.update(text.as_bytes());
        h.update(&(INPUT_DIM as u32).to_le_bytes());
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        format!("{:08x}{:08x}", h.finalize(), text.len())
    }
}

/// Summary of a training run; serialized next to cached models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub n_train: usize,
    pub n_test: usize,
    pub train_mae: Mae,
    pub test_mae: Mae,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub dataset_seconds: f64,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRun {
    pub model: MlpModel,
    pub metrics: TrainingMetrics,
    pub dataset: Dataset,
}

/// Builds the labelled dataset, trains and scores on the held-out split.
pub fn run_training(cfg: &TrainingConfig, exec: Execution) -> Result<TrainingRun, PredictorError> {
    let templates = cfg.templates()?;
    let t0 = Instant::now();
    let dataset = build_dataset(
        &templates,
        &cfg.grid,
        cfg.n_samples,
        cfg.dataset_seed,
        &cfg.generator,
        exec,
    )?;
    let dataset_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let outcome = train(&dataset.train, &cfg.hyperparams)?;
    let train_seconds = t1.elapsed().as_secs_f64();
    let metrics = TrainingMetrics {
        n_train: dataset.train.len(),
        n_test: dataset.test.len(),
        train_mae: mean_absolute_error(&outcome.model, &dataset.train)?,
        test_mae: mean_absolute_error(&outcome.model, &dataset.test)?,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        dataset_seconds,
        train_seconds,
    };
    log::info!(
        "held-out MAE fnr {:.4} fpr {:.4} ({} test samples)",
        metrics.test_mae.fnr,
        metrics.test_mae.fpr,
        metrics.n_test
    );
    Ok(TrainingRun {
        model: outcome.model,
        metrics,
        dataset,
    })
}

/// Paths of the cached model and its metrics for `cfg` under `dir`.
pub fn cache_paths(cfg: &TrainingConfig, dir: &Path) -> (PathBuf, PathBuf) {
    let stem = format!("predictor-{}", cfg.fingerprint());
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
}

/// Returns the cached model for `cfg` if present, otherwise trains and
/// caches it. The flag reports whether training ran.
pub fn load_or_train(
    cfg: &TrainingConfig,
    dir: &Path,
    exec: Execution,
) -> Result<(MlpModel, TrainingMetrics, bool), PredictorError> {
    let (model_path, metrics_path) = cache_paths(cfg, dir);
    if model_path.exists() && metrics_path.exists() {
        let model = load_model(&model_path)?;
        model.validate_predictor_topology()?;
        let metrics = serde_json::from_slice(&std::fs::read(&metrics_path)?)
            .map_err(|e| PredictorError::ModelFormat(format!("{}: {e}", metrics_path.display())))?;
        return Ok((model, metrics, false));
    }
    let run = run_training(cfg, exec)?;
    std::fs::create_dir_all(dir)?;
    // Write-then-rename so concurrent readers never see partial files.
    let tmp_model = model_path.with_extension(format!("bin.{}", std::process::id()));
    let tmp_metrics = metrics_path.with_extension(format!("json.{}", std::process::id()));
    save_model(&run.model, &tmp_model)?;
    std::fs::write(
        &tmp_metrics,
        serde_json::to_vec_pretty(&run.metrics).expect("metrics serialize"),
    )?;
    std::fs::rename(&tmp_metrics, &metrics_path)?;
    std::fs::rename(&tmp_model, &model_path)?;
    Ok((run.model, run.metrics, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainingConfig {
        TrainingConfig {
            n_templates: 6,
            n_samples: 12,
            generator: GeneratorConfig {
                duration_s: 0.5,
                ..Default::default()
            },
            hyperparams: Hyperparams {
                max_epochs: 5,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let a = TrainingConfig::default();
        assert_eq!(a.fingerprint(), TrainingConfig::default().fingerprint());
        let mut b = a.clone();
        b.hyperparams.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.generator.noise_sigma_uv = 5.5;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn cache_skips_second_training() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let (m1, r1, trained) = load_or_train(&cfg, dir.path(), Execution::Parallel).unwrap();
        assert!(trained);
        assert_eq!(r1.n_train + r1.n_test, 12);
        let (m2, r2, trained) = load_or_train(&cfg, dir.path(), Execution::Parallel).unwrap();
        assert!(!trained);
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn template_bank_is_seeded() {
        let cfg = tiny();
        assert_eq!(cfg.templates().unwrap(), cfg.templates().unwrap());
        let bad = TrainingConfig {
            amplitude_range_uv: (0.0, 10.0),
            ..tiny()
        };
        assert!(bad.templates().is_err());
    }
}
