use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::PredictorError;
use crate::evaluation::DEFAULT_WINDOW_S;
use crate::signal::{bandpass_filter, Band, Resampler, Signal, SpikeTemplate, DEFAULT_DEAD_TIME_S, TEMPLATE_LEN};

/// Width of the model input: eleven scalar features plus the template.
pub const INPUT_DIM: usize = 11 + TEMPLATE_LEN;

/// Scale applied to sigma-valued features so they sit near unit range.
const SIGMA_SCALE: f64 = 10.0;
const THRESHOLD_SCALE: f64 = 5.0;
const SNR_SCALE: f64 = 5.0;
const LOGIT_SCALE: f64 = 5.0;
/// Zero padding around a template when simulating its noiseless response.
const RESPONSE_PAD: usize = 384;

/// Predicted or measured detection error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub fnr: f64,
    pub fpr: f64,
}

impl ErrorEstimate {
    pub fn new(fnr: f64, fpr: f64) -> Result<Self, PredictorError> {
        for v in [fnr, fpr] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PredictorError::OutOfRange(v));
            }
        }
        Ok(Self { fnr, fpr })
    }

    pub fn total(&self) -> f64 {
        self.fnr + self.fpr
    }
}

/// Standard deviation of band-passed noise at a decimated rate relative to the
/// white noise at the base rate, from the resampling kernel and the
/// conditioning filter's responses. Memoized per (rate, factor).
pub fn filtered_noise_gain(base_rate_hz: f64, factor: u32) -> Result<f64, PredictorError> {
    static CACHE: Mutex<Option<HashMap<(u64, u32), f64>>> = Mutex::new(None);
    let key = (base_rate_hz.to_bits(), factor);
    if let Some(&g) = CACHE
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .get_or_insert_with(HashMap::new)
        .get(&key)
    {
        return Ok(g);
    }
    let g = compute_noise_gain(base_rate_hz, factor)?;
    CACHE
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .get_or_insert_with(HashMap::new)
        .insert(key, g);
    Ok(g)
}

fn compute_noise_gain(base_rate_hz: f64, factor: u32) -> Result<f64, PredictorError> {
    if factor == 0 {
        return Err(PredictorError::InvalidFactor(factor));
    }
    let rate = base_rate_hz / factor as f64;
    let sections = Band::for_rate(rate).sections(rate)?;
    // Output instants fall on source samples, so only the zero phase is used.
    let fir: Vec<f64> = if factor == 1 {
        vec![1.0]
    } else {
        let w = Resampler::new(base_rate_hz, rate)?.phase_weights(0.0);
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    };
    let offset = if factor == 1 {
        0
    } else {
        crate::signal::KERNEL_HALF_TAPS as isize - 1
    };
    let n = 4096 * factor as usize;
    let mut acc = 0.0;
    for i in 0..n {
        let f = (i as f64 + 0.5) / n as f64 * 0.5;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, &w) in fir.iter().enumerate() {
            let ph = -2.0 * PI * f * (k as isize - offset) as f64;
            re += w * ph.cos();
            im += w * ph.sin();
        }
        let w_dec = 2.0 * PI * f * factor as f64;
        let bp: f64 = sections.iter().map(|s| s.power_response(w_dec)).product();
        acc += (re * re + im * im) * bp;
    }
    Ok((2.0 * acc * 0.5 / n as f64).sqrt())
}

/// Noise-free behaviour of a template through acquisition at one factor,
/// for each of the factor's possible sampling phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateResponse {
    /// Output sample rate, Hz.
    pub rate_hz: f64,
    pub phases: Vec<PhaseResponse>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseResponse {
    /// True spike time in output samples (fractional).
    pub true_index: f64,
    /// Zero-baseline negative excursions of the filtered response, in order.
    pub excursions: Vec<Excursion>,
    /// Index into `excursions` of the deepest one.
    pub main: usize,
}

/// One baseline-to-baseline negative excursion of a noiseless response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Excursion {
    /// First negative sample.
    pub onset: usize,
    /// Most negative sample.
    pub trough: usize,
    pub depth_uv: f64,
    /// Drop across the onset, µV per sample.
    pub onset_slope_uv: f64,
    /// Second difference at the trough, µV per sample squared.
    pub curvature_uv: f64,
}

/// Floor on timing jitter, samples.
const MIN_JITTER: f64 = 0.15;

/// Excursions shallower than this fraction of the main trough are ignored.
const MIN_RELATIVE_DEPTH: f64 = 0.01;

impl TemplateResponse {
    pub fn compute(template: &SpikeTemplate, factor: u32) -> Result<Self, PredictorError> {
        if factor == 0 {
            return Err(PredictorError::InvalidFactor(factor));
        }
        let base = template.base_rate_hz;
        let rate = base / factor as f64;
        let band = Band::for_rate(rate);
        let resampler = Resampler::new(base, rate)?;
        let mut phases = Vec::with_capacity(factor as usize);
        for phase in 0..factor as usize {
            let mut buf = vec![0.0; 2 * RESPONSE_PAD + TEMPLATE_LEN + phase];
            let start = RESPONSE_PAD + phase;
            buf[start..start + TEMPLATE_LEN].copy_from_slice(&template.waveform);
            let filtered = bandpass_filter(&Signal::new(0, rate, resampler.process(&buf)), band)?.samples;
            let all = excursions(&filtered);
            let deepest = all.iter().fold(0.0, |m: f64, e| m.max(e.depth_uv));
            let excursions: Vec<Excursion> = all
                .into_iter()
                .filter(|e| e.depth_uv >= MIN_RELATIVE_DEPTH * deepest)
                .collect();
            let main = excursions
                .iter()
                .enumerate()
                .fold(
                    (0, 0.0),
                    |(bi, bd), (i, e)| if e.depth_uv > bd { (i, e.depth_uv) } else { (bi, bd) },
                )
                .0;
            phases.push(PhaseResponse {
                true_index: (start + template.trough_index()) as f64 / factor as f64,
                excursions,
                main,
            });
        }
        Ok(Self { rate_hz: rate, phases })
    }

    fn mean_of(&self, f: impl Fn(&PhaseResponse) -> f64) -> f64 {
        self.phases.iter().map(f).sum::<f64>() / self.phases.len() as f64
    }

    pub fn mean_depth_uv(&self) -> f64 {
        self.mean_of(PhaseResponse::depth_uv)
    }

    pub fn worst_depth_uv(&self) -> f64 {
        self.phases
            .iter()
            .map(PhaseResponse::depth_uv)
            .fold(f64::INFINITY, f64::min)
    }

    /// Mean over phases of the deepest excursion other than the main one.
    pub fn mean_secondary_uv(&self) -> f64 {
        self.mean_of(|p| {
            p.excursions
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != p.main)
                .fold(0.0, |m: f64, (_, e)| m.max(e.depth_uv))
        })
    }

    /// Mean over phases of the main trough's distance from the true spike
    /// time, seconds.
    pub fn mean_abs_offset_s(&self) -> f64 {
        self.mean_of(|p| {
            p.excursions
                .get(p.main)
                .map_or(0.0, |e| (e.trough as f64 - p.true_index).abs())
                / self.rate_hz
        })
    }

    /// Expected per-spike miss and spurious-detection rates for a threshold
    /// of `th_sigmas` filtered-noise sigmas (positive magnitude), averaged
    /// over phases.
    ///
    /// Runs the detector over each phase's excursions in time order with
    /// independent Gaussian perturbations: an excursion crosses with
    /// probability `Phi(depth/sigma - th)`, clears the dead time with a
    /// probability smoothed by onset jitter (sigma over onset slope), and
    /// matches the spike when its trough, jittered by sigma over curvature,
    /// lands inside the match window.
    pub fn expected_errors(&self, sigma_uv: f64, th_sigmas: f64, dead_time_s: f64, window_s: f64) -> (f64, f64) {
        let dead = dead_time_s * self.rate_hz;
        let window = window_s * self.rate_hz;
        let (mut fnr, mut fpr) = (0.0, 0.0);
        for p in &self.phases {
            // (trough and jitter of the last emitted event, matched yet, probability)
            let mut states: Vec<State> = vec![(None, false, 1.0)];
            let mut emitted = 0.0;
            for e in &p.excursions {
                let cross = normal_cdf(e.depth_uv / sigma_uv - th_sigmas);
                if cross < 1e-9 {
                    continue;
                }
                let onset_jitter = sigma_uv / e.onset_slope_uv.max(1e-12);
                let trough_jitter = (0.7 * sigma_uv / e.curvature_uv.max(1e-12)).max(MIN_JITTER);
                let off = e.trough as f64 - p.true_index;
                let timely = normal_cdf((window - off) / trough_jitter) - normal_cdf((-window - off) / trough_jitter);
                let mut next: Vec<State> = Vec::with_capacity(states.len() * 3);
                for &(last, matched, prob) in &states {
                    let clear = last.map_or(1.0, |(l, l_jitter)| {
                        let j = onset_jitter.hypot(l_jitter).max(MIN_JITTER);
                        normal_cdf((e.onset as f64 - l as f64 - dead + 0.5) / j)
                    });
                    let fire = prob * cross * clear;
                    emitted += fire;
                    next.push((last, matched, prob - fire));
                    let at = Some((e.trough, trough_jitter));
                    if matched {
                        next.push((at, true, fire));
                    } else {
                        next.push((at, true, fire * timely));
                        next.push((at, false, fire * (1.0 - timely)));
                    }
                }
                states = merge_states(next);
            }
            let matched: f64 = states.iter().filter(|s| s.1).map(|s| s.2).sum();
            fnr += 1.0 - matched;
            fpr += emitted - matched;
        }
        let n = self.phases.len() as f64;
        (fnr / n, fpr / n)
    }
}

impl PhaseResponse {
    /// Depth of the main trough, µV.
    pub fn depth_uv(&self) -> f64 {
        self.excursions.get(self.main).map_or(0.0, |e| e.depth_uv)
    }
}

type State = (Option<(usize, f64)>, bool, f64);

fn merge_states(mut v: Vec<State>) -> Vec<State> {
    let key = |s: &State| (s.0.map(|l| l.0), s.1);
    v.sort_by_key(key);
    let mut out: Vec<State> = Vec::with_capacity(v.len());
    for s in v {
        match out.last_mut() {
            Some(l) if key(l) == key(&s) => l.2 += s.2,
            _ if s.2 > 0.0 => out.push(s),
            _ => {}
        }
    }
    out
}

/// Zero-baseline negative excursions.
fn excursions(x: &[f64]) -> Vec<Excursion> {
    let mut out = Vec::new();
    let mut run: Option<Excursion> = None;
    let curvature = |i: usize| {
        if i > 0 && i + 1 < x.len() {
            x[i - 1] + x[i + 1] - 2.0 * x[i]
        } else {
            0.0
        }
    };
    for (i, &v) in x.iter().enumerate() {
        if v < 0.0 {
            let e = run.get_or_insert_with(|| Excursion {
                onset: i,
                trough: i,
                depth_uv: 0.0,
                onset_slope_uv: if i > 0 { x[i - 1] - v } else { -v },
                curvature_uv: 0.0,
            });
            if -v > e.depth_uv {
                e.trough = i;
                e.depth_uv = -v;
            }
        } else if let Some(mut e) = run.take() {
            e.curvature_uv = curvature(e.trough);
            out.push(e);
        }
    }
    if let Some(mut e) = run {
        e.curvature_uv = curvature(e.trough);
        out.push(e);
    }
    out
}

/// Log-odds of a probability clamped to `[1e-4, 1 - 1e-4]`.
fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

/// Logistic approximation of the standard normal CDF (max error ~0.01).
fn normal_cdf(z: f64) -> f64 {
    1.0 / (1.0 + (-1.702 * z).exp())
}

/// Model input for one candidate configuration of one electrode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorInput {
    /// Realized rate over the base rate, `1 / factor`.
    pub rate_norm: f64,
    /// Threshold in wideband noise sigmas, negated (larger is stricter).
    pub threshold_norm: f64,
    /// Template divided by its peak magnitude.
    pub template: Vec<f64>,
    /// Natural log of the template peak over the full-rate filtered noise sigma.
    pub log_snr: f64,
    /// Filtered trough depth minus threshold magnitude, in filtered-noise
    /// sigmas at this rate (phase mean and worst phase).
    pub margin_mean: f64,
    pub margin_worst: f64,
    /// Deepest non-main excursion minus threshold magnitude, filtered sigmas.
    pub secondary_margin: f64,
    /// Analytic miss and spurious rates from [`TemplateResponse::expected_errors`].
    pub expected_fnr: f64,
    pub expected_fpr: f64,
    /// Mean distance of the filtered trough from the true spike time, in
    /// match windows.
    pub timing_offset: f64,
}

/// Noise context of an electrode: wideband (white) noise sigma at the base
/// rate. Detection thresholds are expressed as multiples of this sigma.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseContext {
    pub white_sigma_uv: f64,
    pub base_rate_hz: f64,
}

impl NoiseContext {
    /// Sigma of the conditioned signal at `factor`, µV.
    pub fn filtered_sigma(&self, factor: u32) -> Result<f64, PredictorError> {
        Ok(self.white_sigma_uv * filtered_noise_gain(self.base_rate_hz, factor)?)
    }

    /// Recovers the white-noise sigma from a measured full-rate filtered sigma.
    pub fn from_filtered_sigma(filtered_sigma_uv: f64, base_rate_hz: f64) -> Result<Self, PredictorError> {
        Ok(Self {
            white_sigma_uv: filtered_sigma_uv / filtered_noise_gain(base_rate_hz, 1)?,
            base_rate_hz,
        })
    }

    /// Threshold in µV for `threshold_sigmas` (negative).
    pub fn threshold_uv(&self, threshold_sigmas: f64) -> f64 {
        threshold_sigmas * self.white_sigma_uv
    }
}

impl PredictorInput {
    /// Builds the input for `template` sampled at `factor` with a threshold
    /// of `threshold_sigmas` (negative) wideband noise sigmas.
    pub fn new(
        template: &SpikeTemplate,
        factor: u32,
        threshold_sigmas: f64,
        noise: &NoiseContext,
    ) -> Result<Self, PredictorError> {
        let response = TemplateResponse::compute(template, factor)?;
        Self::with_response(template, factor, threshold_sigmas, noise, &response)
    }

    /// As [`PredictorInput::new`] with a precomputed response (it does not
    /// depend on the threshold).
    pub fn with_response(
        template: &SpikeTemplate,
        factor: u32,
        threshold_sigmas: f64,
        noise: &NoiseContext,
        response: &TemplateResponse,
    ) -> Result<Self, PredictorError> {
        if factor == 0 {
            return Err(PredictorError::InvalidFactor(factor));
        }
        if !(threshold_sigmas < 0.0) {
            return Err(PredictorError::NonNegativeThreshold(threshold_sigmas));
        }
        if !(noise.white_sigma_uv > 0.0) {
            return Err(PredictorError::NonPositiveSigma(noise.white_sigma_uv));
        }
        template.validate()?;
        let peak = template.peak_magnitude();
        let sigma = noise.filtered_sigma(factor)?;
        let k = -threshold_sigmas;
        let th = k * noise.white_sigma_uv / sigma;
        let (expected_fnr, expected_fpr) = response.expected_errors(sigma, th, DEFAULT_DEAD_TIME_S, DEFAULT_WINDOW_S);
        Ok(Self {
            rate_norm: 1.0 / factor as f64,
            threshold_norm: k,
            template: template.waveform.iter().map(|v| v / peak).collect(),
            log_snr: (peak / noise.filtered_sigma(1)?).ln(),
            margin_mean: response.mean_depth_uv() / sigma - th,
            margin_worst: response.worst_depth_uv() / sigma - th,
            secondary_margin: response.mean_secondary_uv() / sigma - th,
            expected_fnr,
            expected_fpr,
            timing_offset: response.mean_abs_offset_s() / DEFAULT_WINDOW_S,
        })
    }

    /// Flat, roughly unit-scaled feature vector of length [`INPUT_DIM`].
    pub fn features(&self) -> Vec<f64> {
        let squash = |m: f64| (m / SIGMA_SCALE).clamp(-3.0, 3.0);
        let mut v = Vec::with_capacity(INPUT_DIM);
        v.push(self.rate_norm);
        v.push(self.threshold_norm / THRESHOLD_SCALE);
        v.push(self.log_snr / SNR_SCALE);
        v.push(squash(self.margin_mean));
        v.push(squash(self.margin_worst));
        v.push(squash(self.secondary_margin));
        v.push(self.expected_fnr);
        v.push(self.expected_fpr.min(2.0));
        v.push(logit(self.expected_fnr) / LOGIT_SCALE);
        v.push(logit(self.expected_fpr) / LOGIT_SCALE);
        v.push(self.timing_offset);
        v.extend_from_slice(&self.template);
        debug_assert_eq!(v.len(), INPUT_DIM);
        v
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        if !(self.rate_norm > 0.0 && self.rate_norm <= 1.0) {
            return Err(PredictorError::OutOfRange(self.rate_norm));
        }
        let peak = self.template.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if self.template.len() != TEMPLATE_LEN || (peak - 1.0).abs() > 1e-9 {
            return Err(PredictorError::DimensionMismatch {
                expected: TEMPLATE_LEN,
                got: self.template.len(),
            });
        }
        Ok(())
    }
}
