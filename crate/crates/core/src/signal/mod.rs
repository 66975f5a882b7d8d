//! Trace representation and the on-chip conditioning chain: band-limited
//! resampling, band-pass filtering, noise estimation, whitening and
//! threshold-crossing detection.

mod detect;
mod filter;
mod resample;
mod trace;

pub use detect::{condition_and_detect, detect_spikes, estimate_noise_sigma, whiten, DEFAULT_DEAD_TIME_S};
pub use filter::{bandpass_filter, Band, Biquad, DEFAULT_BAND};
pub use resample::{resample, resample_trace, Resampler, KAISER_BETA, KERNEL_HALF_TAPS};
pub use trace::{quantize, Channel, NeuralTrace, Signal, SpikeEvent, SpikeTemplate, TraceMeta, TEMPLATE_LEN};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("unknown channel {0}")]
    UnknownChannel(u32),
    #[error("duplicate channel id {0}")]
    DuplicateChannel(u32),
    #[error("sample rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("uv_per_count must be positive, got {0}")]
    InvalidScale(f64),
    #[error("channel {channel} has {samples} samples, expected {expected:.1}")]
    DurationMismatch {
        channel: u32,
        samples: usize,
        expected: f64,
    },
    #[error("band {low_hz}-{high_hz} Hz is not realizable at {rate_hz} Hz")]
    BandTooHigh { low_hz: f64, high_hz: f64, rate_hz: f64 },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("threshold must be negative, got {0}")]
    NonNegativeThreshold(f64),
    #[error("dead time must be non-negative, got {0}")]
    NegativeDeadTime(f64),
    #[error("template for electrode {0} is all zeros")]
    DegenerateTemplate(u32),
    #[error("template has {0} samples")]
    TemplateLength(usize),
    #[error("trace has no channels")]
    Empty,
    #[error("interleaved export needs equal rates and lengths on every channel")]
    NotUniform,
    #[error("binary of {len} bytes does not hold whole {n_channels}-channel frames")]
    MalformedBinary { len: usize, n_channels: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
