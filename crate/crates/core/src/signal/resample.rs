use std::collections::HashMap;

use super::{quantize, Channel, NeuralTrace, SignalError};

/// Kernel reach in source samples on each side of the output instant.
pub const KERNEL_HALF_TAPS: usize = 64;
pub const KAISER_BETA: f64 = 8.6;

/// Fraction of the lower Nyquist-limited rate kept by the anti-alias low-pass.
const CUTOFF_FRACTION: f64 = 0.45;
const MAX_CACHED_PHASES: usize = 4096;
const PHASE_QUANTUM: f64 = 1e-9;

/// Kaiser-windowed sinc interpolator between two sample rates.
///
/// Output sample `k` is the band-limited reconstruction of the input at time
/// `k / target_rate`. The sinc is scaled to cut at
/// `min(0.45 * target, 0.45 * source)` so decimation does not alias. Weights
/// are normalized to unit sum, which keeps DC exact even where the kernel runs
/// off either end of the input.
#[derive(Clone, Debug)]
pub struct Resampler {
    source_rate_hz: f64,
    target_rate_hz: f64,
    /// Cutoff in cycles per source sample.
    cutoff: f64,
    i0_beta: f64,
}

impl Resampler {
    pub fn new(source_rate_hz: f64, target_rate_hz: f64) -> Result<Self, SignalError> {
        for r in [source_rate_hz, target_rate_hz] {
            if !(r > 0.0 && r.is_finite()) {
                return Err(SignalError::NonPositiveRate(r));
            }
        }
        let cutoff_hz = CUTOFF_FRACTION * target_rate_hz.min(source_rate_hz);
        Ok(Self {
            source_rate_hz,
            target_rate_hz,
            cutoff: cutoff_hz / source_rate_hz,
            i0_beta: bessel_i0(KAISER_BETA),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.source_rate_hz == self.target_rate_hz
    }

    /// Number of output samples covering an input of `n` samples.
    pub fn output_len(&self, n: usize) -> usize {
        if self.is_identity() {
            return n;
        }
        let exact = n as f64 * self.target_rate_hz / self.source_rate_hz;
        (exact - 1e-9).ceil().max(0.0) as usize
    }

    /// Windowed-sinc value at offset `d` source samples.
    fn kernel(&self, d: f64) -> f64 {
        let half = KERNEL_HALF_TAPS as f64;
        if d.abs() >= half {
            return 0.0;
        }
        let r = d / half;
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta;
        let x = 2.0 * self.cutoff * d;
        let sinc = if x == 0.0 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        };
        2.0 * self.cutoff * sinc * window
    }

    /// Unnormalized weights for source taps `floor(t)-63 ..= floor(t)+64`
    /// given the fractional part of `t`.
    pub fn phase_weights(&self, frac: f64) -> Vec<f64> {
        let lo = -(KERNEL_HALF_TAPS as isize) + 1;
        let hi = KERNEL_HALF_TAPS as isize;
        (lo..=hi).map(|j| self.kernel(frac - j as f64)).collect()
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return input.to_vec();
        }
        let n_out = self.output_len(input.len());
        let step = self.source_rate_hz / self.target_rate_hz;
        let n = input.len() as isize;
        let lo = -(KERNEL_HALF_TAPS as isize) + 1;
        let mut cache: HashMap<u64, (Vec<f64>, f64)> = HashMap::new();
        let mut out = Vec::with_capacity(n_out);
        for k in 0..n_out {
            let t = k as f64 * step;
            let mut i0 = t.floor();
            let mut frac = t - i0;
            if 1.0 - frac < PHASE_QUANTUM {
                i0 += 1.0;
                frac = 0.0;
            }
            let key = (frac / PHASE_QUANTUM).round() as u64;
            let computed;
            if !cache.contains_key(&key) && cache.len() < MAX_CACHED_PHASES {
                let w = self.phase_weights(frac);
                let s = w.iter().sum::<f64>();
                cache.insert(key, (w, s));
            }
            let (weights, sum) = match cache.get(&key) {
                Some(entry) => (&entry.0, entry.1),
                None => {
                    computed = self.phase_weights(frac);
                    (&computed, computed.iter().sum::<f64>())
                }
            };
            let start = i0 as isize + lo;
            let end = start + weights.len() as isize;
            let y = if start >= 0 && end <= n {
                let window = &input[start as usize..end as usize];
                let acc: f64 = window.iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
                acc / sum
            } else {
                let a = start.max(0);
                let b = end.min(n);
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for j in a..b {
                    let w = weights[(j - start) as usize];
                    acc += input[j as usize] * w;
                    wsum += w;
                }
                if wsum.abs() > 1e-12 {
                    acc / wsum
                } else {
                    0.0
                }
            };
            out.push(y);
        }
        out
    }
}

/// Band-limited resampling of a real sequence.
pub fn resample(input: &[f64], source_rate_hz: f64, target_rate_hz: f64) -> Result<Vec<f64>, SignalError> {
    Ok(Resampler::new(source_rate_hz, target_rate_hz)?.process(input))
}

/// Re-digitizes one channel of `trace` at `target_rate_hz`. Equal rates
/// return the samples untouched.
pub fn resample_trace(trace: &NeuralTrace, channel: u32, target_rate_hz: f64) -> Result<NeuralTrace, SignalError> {
    let ch = trace.channel(channel)?;
    let resampler = Resampler::new(ch.sample_rate_hz, target_rate_hz)?;
    let samples = if resampler.is_identity() {
        ch.samples.clone()
    } else {
        let x: Vec<f64> = ch.samples.iter().map(|&s| f64::from(s)).collect();
        quantize(&resampler.process(&x), 1.0)
    };
    NeuralTrace::new(
        vec![Channel {
            id: ch.id,
            sample_rate_hz: target_rate_hz,
            samples,
        }],
        trace.uv_per_count(),
    )
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let y = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= y / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}
