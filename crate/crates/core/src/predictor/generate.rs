use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{ErrorEstimate, NoiseContext, PredictorInput, TemplateResponse};
use super::PredictorError;
use crate::acquisition::FactorSet;
use crate::evaluation::{match_events, ElectrodeGroundTruth, DEFAULT_WINDOW_S};
use crate::exec::{self, Execution};
use crate::signal::{condition_and_detect, quantize, Resampler, Signal, SpikeTemplate, DEFAULT_DEAD_TIME_S};
use crate::synth::{add_waveform, spike_times, DEFAULT_BASE_RATE_HZ, DEFAULT_UV_PER_COUNT};

/// Settings shared by every generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_rate_hz: f64,
    pub duration_s: f64,
    pub noise_sigma_uv: f64,
    pub firing_rate_hz: f64,
    pub min_isi_s: f64,
    pub edge_margin_s: f64,
    pub dead_time_s: f64,
    pub match_window_s: f64,
    pub uv_per_count: f64,
    pub factors: FactorSet,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_rate_hz: DEFAULT_BASE_RATE_HZ,
            duration_s: 10.0,
            noise_sigma_uv: 5.0,
            firing_rate_hz: 20.0,
            min_isi_s: 2e-3,
            edge_margin_s: 10e-3,
            dead_time_s: DEFAULT_DEAD_TIME_S,
            match_window_s: DEFAULT_WINDOW_S,
            uv_per_count: DEFAULT_UV_PER_COUNT,
            factors: FactorSet::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn noise(&self) -> NoiseContext {
        NoiseContext {
            white_sigma_uv: self.noise_sigma_uv,
            base_rate_hz: self.base_rate_hz,
        }
    }
}

/// Bookkeeping for one generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub template_id: u32,
    pub factor: u32,
    pub threshold_sigmas: f64,
    pub threshold_uv: f64,
    pub noise_sigma_uv: f64,
    pub seed: u64,
    pub n_true: usize,
    pub n_detected: usize,
    pub n_matched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub input: PredictorInput,
    pub target: ErrorEstimate,
    pub meta: SampleMeta,
}

/// Measures FNR/FPR for one configuration by simulation: a seeded segment of
/// white noise with the template inserted at refractory Poisson times is
/// digitized, re-digitized at `base / factor`, conditioned and thresholded at
/// `threshold_uv`, and the detections are matched to the insertion times.
pub fn generate_training_sample(
    template: &SpikeTemplate,
    factor: u32,
    threshold_uv: f64,
    noise_sigma_uv: f64,
    firing_rate_hz: f64,
    seed: u64,
    cfg: &GeneratorConfig,
) -> Result<TrainingSample, PredictorError> {
    let response = TemplateResponse::compute(template, factor)?;
    generate_with_response(
        template,
        &response,
        factor,
        threshold_uv,
        noise_sigma_uv,
        firing_rate_hz,
        seed,
        cfg,
    )
}

#[allow(clippy::too_many_arguments)]
fn generate_with_response(
    template: &SpikeTemplate,
    response: &TemplateResponse,
    factor: u32,
    threshold_uv: f64,
    noise_sigma_uv: f64,
    firing_rate_hz: f64,
    seed: u64,
    cfg: &GeneratorConfig,
) -> Result<TrainingSample, PredictorError> {
    if !cfg.factors.contains(factor) {
        return Err(PredictorError::InvalidFactor(factor));
    }
    if !(firing_rate_hz > 0.0) {
        return Err(PredictorError::NonPositiveRate(firing_rate_hz));
    }
    if !(noise_sigma_uv > 0.0) {
        return Err(PredictorError::NonPositiveSigma(noise_sigma_uv));
    }
    if (template.base_rate_hz - cfg.base_rate_hz).abs() > 1e-9 {
        return Err(PredictorError::RateMismatch(template.base_rate_hz));
    }
    let noise = NoiseContext {
        white_sigma_uv: noise_sigma_uv,
        base_rate_hz: cfg.base_rate_hz,
    };
    let threshold_sigmas = threshold_uv / noise_sigma_uv;
    let input = PredictorInput::with_response(template, factor, threshold_sigmas, &noise, response)?;

    let rate = cfg.base_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = spike_times(
        &mut rng,
        firing_rate_hz,
        cfg.duration_s,
        cfg.min_isi_s,
        cfg.edge_margin_s,
    );
    let n = (cfg.duration_s * rate).round() as usize;
    let normal = Normal::new(0.0, noise_sigma_uv).expect("checked sigma");
    let mut buf: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let align = template.trough_index();
    let mut truth = Vec::with_capacity(times.len());
    for t in &times {
        let idx = (t * rate).round() as usize;
        add_waveform(&mut buf, &template.waveform, align, idx, 1.0);
        truth.push(idx as f64 / rate);
    }

    let detected = condition_and_detect(&digitize(&buf, factor, cfg)?, threshold_uv, cfg.dead_time_s)?;
    let truth = ElectrodeGroundTruth {
        electrode_id: template.electrode_id,
        event_times_s: truth,
    };
    let report = match_events(&truth, &detected, cfg.match_window_s);
    Ok(TrainingSample {
        input,
        target: ErrorEstimate::new(report.fnr, report.fpr)?,
        meta: SampleMeta {
            template_id: template.electrode_id,
            factor,
            threshold_sigmas,
            threshold_uv,
            noise_sigma_uv,
            seed,
            n_true: report.n_true,
            n_detected: report.n_detected,
            n_matched: report.n_matched,
        },
    })
}

/// Full-rate ADC, band-limited re-digitization at `base / factor`, and
/// conversion back to microvolts -- the same path `acquire` takes.
fn digitize(analog_uv: &[f64], factor: u32, cfg: &GeneratorConfig) -> Result<Signal, PredictorError> {
    let scale = cfg.uv_per_count;
    let counts: Vec<f64> = quantize(analog_uv, scale).into_iter().map(f64::from).collect();
    let rate = cfg.base_rate_hz / factor as f64;
    let resampled = Resampler::new(cfg.base_rate_hz, rate)?.process(&counts);
    let requantized = quantize(&resampled, 1.0);
    Ok(Signal::new(
        0,
        rate,
        requantized.into_iter().map(|c| f64::from(c) * scale).collect(),
    ))
}

/// Candidate configurations the dataset and optimizer range over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterGrid {
    pub factors: Vec<u32>,
    /// Negative thresholds in wideband noise sigmas.
    pub thresholds_sigmas: Vec<f64>,
}

impl Default for ParameterGrid {
    fn default() -> Self {
        Self {
            factors: FactorSet::default().factors().to_vec(),
            thresholds_sigmas: vec![-3.0, -3.5, -4.0, -4.5, -5.0],
        }
    }
}

impl ParameterGrid {
    pub fn validate(&self, factors: &FactorSet) -> Result<(), PredictorError> {
        if self.factors.is_empty() || self.thresholds_sigmas.is_empty() {
            return Err(PredictorError::EmptyGrid);
        }
        if let Some(&f) = self.factors.iter().find(|&&f| !factors.contains(f)) {
            return Err(PredictorError::InvalidFactor(f));
        }
        if let Some(&t) = self.thresholds_sigmas.iter().find(|&&t| !(t < 0.0)) {
            return Err(PredictorError::NonNegativeThreshold(t));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<TrainingSample>,
    pub test: Vec<TrainingSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One row per sample with its split, configuration and measured labels.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "split,template_id,factor,threshold_sigmas,threshold_uv,noise_sigma_uv,seed,n_true,n_detected,n_matched,fnr,fpr"
        )?;
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for s in samples {
                let m = &s.meta;
                writeln!(
                    w,
                    "{split},{},{},{},{:.4},{},{},{},{},{},{:.6},{:.6}",
                    m.template_id,
                    m.factor,
                    m.threshold_sigmas,
                    m.threshold_uv,
                    m.noise_sigma_uv,
                    m.seed,
                    m.n_true,
                    m.n_detected,
                    m.n_matched,
                    s.target.fnr,
                    s.target.fpr
                )?;
            }
        }
        Ok(())
    }
}

/// Draws `n_samples` configurations uniformly over templates x grid, each with
/// its own noise seed, measures their labels and splits 80/20 after a seeded
/// shuffle.
pub fn build_dataset(
    templates: &[SpikeTemplate],
    grid: &ParameterGrid,
    n_samples: usize,
    seed: u64,
    cfg: &GeneratorConfig,
    exec: Execution,
) -> Result<Dataset, PredictorError> {
    if templates.is_empty() {
        return Err(PredictorError::EmptyTemplates);
    }
    grid.validate(&cfg.factors)?;
    if n_samples < 10 {
        return Err(PredictorError::TooFewSamples(n_samples));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(usize, u32, f64, u64)> = (0..n_samples)
        .map(|_| {
            let t = rng.random_range(0..templates.len());
            let f = grid.factors[rng.random_range(0..grid.factors.len())];
            let k = grid.thresholds_sigmas[rng.random_range(0..grid.thresholds_sigmas.len())];
            (t, f, k, rng.random())
        })
        .collect();
    let noise = cfg.noise();
    let samples = exec::map(exec, &draws, |&(t, f, k, s)| {
        let template = &templates[t];
        let response = TemplateResponse::compute(template, f)?;
        let threshold_uv = noise.threshold_uv(k);
        generate_with_response(
            template,
            &response,
            f,
            threshold_uv,
            cfg.noise_sigma_uv,
            cfg.firing_rate_hz,
            s,
            cfg,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng);
    let n_train = (0.8 * n_samples as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok(Dataset {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{resample_trace, Channel, NeuralTrace};
    use crate::synth::BiphasicShape;

    fn template(amp: f64) -> SpikeTemplate {
        BiphasicShape {
            amplitude_uv: amp,
            duration_s: 0.6e-3,
            lobe_ratio: 0.4,
            lobe_width_ratio: 1.8,
        }
        .template(0, 30_000.0)
        .unwrap()
    }

    fn short() -> GeneratorConfig {
        GeneratorConfig {
            duration_s: 2.0,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn large_spike_strict_threshold_is_error_free() {
        let s =
            generate_training_sample(&template(200.0), 1, -30.0, 5.0, 20.0, 1, &GeneratorConfig::default()).unwrap();
        assert!(s.meta.n_true > 150);
        assert!(s.target.fnr <= 0.01, "{:?}", s.target);
        assert!(s.target.fpr <= 0.01, "{:?}", s.target);
    }

    #[test]
    fn unreachable_threshold_misses_everything() {
        let t = template(40.0);
        let s = generate_training_sample(&t, 4, -500.0, 5.0, 20.0, 2, &short()).unwrap();
        assert_eq!((s.target.fnr, s.target.fpr), (1.0, 0.0));
    }

    #[test]
    fn same_seed_same_sample() {
        let t = template(60.0);
        let a = generate_training_sample(&t, 3, -12.0, 5.0, 20.0, 9, &short()).unwrap();
        let b = generate_training_sample(&t, 3, -12.0, 5.0, 20.0, 9, &short()).unwrap();
        assert_eq!(a, b);
        assert!(generate_training_sample(&t, 7, -12.0, 5.0, 20.0, 9, &short()).is_err());
        assert!(generate_training_sample(&t, 3, -12.0, 5.0, 0.0, 9, &short()).is_err());
    }

    #[test]
    fn digitize_matches_resample_trace() {
        let cfg = short();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let analog: Vec<f64> = (0..6000).map(|_| rng.random_range(-50.0..50.0)).collect();
        let counts = quantize(&analog, cfg.uv_per_count);
        let trace = NeuralTrace::new(
            vec![Channel {
                id: 0,
                sample_rate_hz: 30_000.0,
                samples: counts,
            }],
            cfg.uv_per_count,
        )
        .unwrap();
        let via_trace = resample_trace(&trace, 0, 10_000.0).unwrap().signal_uv(0).unwrap();
        assert_eq!(digitize(&analog, 3, &cfg).unwrap().samples, via_trace.samples);
    }

    #[test]
    fn stricter_threshold_never_adds_false_positives_on_matched_seeds() {
        let t = template(35.0);
        let cfg = short();
        for factor in [1, 3] {
            let mut last = f64::INFINITY;
            for th in [-6.0, -8.0, -10.0, -12.0, -15.0] {
                let s = generate_training_sample(&t, factor, th, 5.0, 20.0, 4, &cfg).unwrap();
                assert!(s.target.fpr <= last, "factor {factor} th {th}");
                last = s.target.fpr;
            }
        }
    }

    #[test]
    fn dataset_split_sizes_and_determinism() {
        let templates = vec![template(80.0), template(30.0)];
        let grid = ParameterGrid {
            factors: vec![1, 2],
            thresholds_sigmas: vec![-4.0, -5.0],
        };
        let cfg = GeneratorConfig {
            duration_s: 0.5,
            ..GeneratorConfig::default()
        };
        let a = build_dataset(&templates, &grid, 10, 5, &cfg, Execution::Parallel).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (8, 2));
        let b = build_dataset(&templates, &grid, 10, 5, &cfg, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 11);
        assert!(build_dataset(&[], &grid, 10, 5, &cfg, Execution::Sequential).is_err());
        let empty = ParameterGrid {
            factors: vec![],
            thresholds_sigmas: vec![-4.0],
        };
        assert!(build_dataset(&templates, &empty, 10, 5, &cfg, Execution::Sequential).is_err());
        assert!(build_dataset(&templates, &grid, 9, 5, &cfg, Execution::Sequential).is_err());
    }
}
