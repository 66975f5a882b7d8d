use std::collections::HashSet;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Mutex;

use super::{Signal, SignalError};

/// Nominal spike band.
pub const DEFAULT_BAND: Band = Band {
    low_hz: 300.0,
    high_hz: 3000.0,
};

/// Upper edge is clamped to this fraction of the sample rate when the nominal
/// band does not fit under Nyquist.
const CLAMP_FRACTION: f64 = 0.45;

/// Second-order section, transposed direct form II.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
    z1: f64,
    z2: f64,
}

impl Biquad {
    pub fn new(b0: f64, b1: f64, b2: f64, a1: f64, a2: f64) -> Self {
        Self {
            b0,
            b1,
            b2,
            a1,
            a2,
            z1: 0.0,
            z2: 0.0,
        }
    }

    /// Butterworth low-pass via the bilinear transform with prewarping.
    pub fn lowpass(cutoff_hz: f64, rate_hz: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / rate_hz;
        let alpha = w0.sin() / (2.0 * FRAC_1_SQRT_2);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        Self::new(
            (1.0 - cos) / 2.0 / a0,
            (1.0 - cos) / a0,
            (1.0 - cos) / 2.0 / a0,
            -2.0 * cos / a0,
            (1.0 - alpha) / a0,
        )
    }

    /// Butterworth high-pass via the bilinear transform with prewarping.
    pub fn highpass(cutoff_hz: f64, rate_hz: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / rate_hz;
        let alpha = w0.sin() / (2.0 * FRAC_1_SQRT_2);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        Self::new(
            (1.0 + cos) / 2.0 / a0,
            -(1.0 + cos) / a0,
            (1.0 + cos) / 2.0 / a0,
            -2.0 * cos / a0,
            (1.0 - alpha) / a0,
        )
    }

    #[inline]
    pub fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.z1;
        self.z1 = self.b1 * x - self.a1 * y + self.z2;
        self.z2 = self.b2 * x - self.a2 * y;
        y
    }

    pub fn reset(&mut self) {
        self.z1 = 0.0;
        self.z2 = 0.0;
    }

    /// Squared magnitude response at normalized angular frequency `w` (rad/sample).
    pub fn power_response(&self, w: f64) -> f64 {
        let (c1, s1) = (w.cos(), w.sin());
        let (c2, s2) = ((2.0 * w).cos(), (2.0 * w).sin());
        let nr = self.b0 + self.b1 * c1 + self.b2 * c2;
        let ni = -(self.b1 * s1 + self.b2 * s2);
        let dr = 1.0 + self.a1 * c1 + self.a2 * c2;
        let di = -(self.a1 * s1 + self.a2 * s2);
        (nr * nr + ni * ni) / (dr * dr + di * di)
    }
}

/// Pass band of the conditioning filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub low_hz: f64,
    pub high_hz: f64,
}

static CLAMP_WARNED: Mutex<Option<HashSet<u64>>> = Mutex::new(None);

impl Band {
    /// The default band, with the upper edge clamped to `0.45 * rate` when the
    /// rate cannot carry 3 kHz.
    pub fn for_rate(rate_hz: f64) -> Band {
        let mut band = DEFAULT_BAND;
        if band.high_hz >= CLAMP_FRACTION * rate_hz {
            band.high_hz = CLAMP_FRACTION * rate_hz;
            let mut warned = CLAMP_WARNED.lock().unwrap_or_else(|e| e.into_inner());
            if warned.get_or_insert_with(HashSet::new).insert(rate_hz.to_bits()) {
                log::warn!(
                    "rate {rate_hz:.1} Hz cannot carry a {} Hz band edge; clamping to {:.1} Hz",
                    DEFAULT_BAND.high_hz,
                    band.high_hz
                );
            }
        }
        band
    }

    pub fn validate(&self, rate_hz: f64) -> Result<(), SignalError> {
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < rate_hz / 2.0) {
            return Err(SignalError::BandTooHigh {
                low_hz: self.low_hz,
                high_hz: self.high_hz,
                rate_hz,
            });
        }
        Ok(())
    }

    /// The two sections: second-order high-pass then second-order low-pass.
    pub fn sections(&self, rate_hz: f64) -> Result<[Biquad; 2], SignalError> {
        self.validate(rate_hz)?;
        Ok([
            Biquad::highpass(self.low_hz, rate_hz),
            Biquad::lowpass(self.high_hz, rate_hz),
        ])
    }

    /// Magnitude response in dB at `freq_hz`.
    pub fn gain_db(&self, freq_hz: f64, rate_hz: f64) -> Result<f64, SignalError> {
        let w = 2.0 * PI * freq_hz / rate_hz;
        let p: f64 = self.sections(rate_hz)?.iter().map(|s| s.power_response(w)).product();
        Ok(10.0 * p.log10())
    }
}

/// Causal fourth-order band-pass (two cascaded Butterworth sections).
pub fn bandpass_filter(signal: &Signal, band: Band) -> Result<Signal, SignalError> {
    let mut sections = band.sections(signal.sample_rate_hz)?;
    let samples = signal
        .samples
        .iter()
        .map(|&x| sections.iter_mut().fold(x, |acc, s| s.step(acc)))
        .collect();
    Ok(Signal {
        channel_id: signal.channel_id,
        sample_rate_hz: signal.sample_rate_hz,
        samples,
    })
}
