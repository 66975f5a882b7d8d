use super::{bandpass_filter, Band, Signal, SignalError, SpikeEvent};

/// Refractory-scale suppression window after an emitted event.
pub const DEFAULT_DEAD_TIME_S: f64 = 1e-3;

const MAD_TO_SIGMA: f64 = 0.6745;
const MIN_NOISE_SAMPLES: usize = 100;
const DEAD_TIME_SLACK: f64 = 1e-6;

/// Robust noise scale: `median(|x - median(x)|) / 0.6745`.
pub fn estimate_noise_sigma(signal: &Signal) -> Result<f64, SignalError> {
    let n = signal.samples.len();
    if n < MIN_NOISE_SAMPLES {
        return Err(SignalError::TooFewSamples {
            needed: MIN_NOISE_SAMPLES,
            got: n,
        });
    }
    let mut buf = signal.samples.clone();
    let med = median_in_place(&mut buf);
    for (b, &x) in buf.iter_mut().zip(&signal.samples) {
        *b = (x - med).abs();
    }
    Ok(median_in_place(&mut buf) / MAD_TO_SIGMA)
}

fn median_in_place(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    let mid = n / 2;
    let (_, &mut upper, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = buf[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Divides every sample by `sigma`; the result is in noise sigmas.
pub fn whiten(signal: &Signal, sigma: f64) -> Result<Signal, SignalError> {
    if !(sigma > 0.0) {
        return Err(SignalError::NonPositiveSigma(sigma));
    }
    Ok(Signal {
        channel_id: signal.channel_id,
        sample_rate_hz: signal.sample_rate_hz,
        samples: signal.samples.iter().map(|x| x / sigma).collect(),
    })
}

/// Negative-going threshold crossing detector.
///
/// An excursion runs from the sample where the signal leaves the zero
/// baseline downwards to the sample where it returns; it is a candidate when
/// it reaches below `threshold` and is timed at its most negative sample.
/// A candidate whose onset lies within `dead_time_s` of the previously
/// emitted event is suppressed, so the filter undershoot trailing a spike is
/// not counted as a second one. Onsets do not depend on the threshold, which
/// keeps the event count monotone as the threshold is made stricter.
pub fn detect_spikes(signal: &Signal, threshold: f64, dead_time_s: f64) -> Result<Vec<SpikeEvent>, SignalError> {
    if !(threshold < 0.0) {
        return Err(SignalError::NonNegativeThreshold(threshold));
    }
    if !(dead_time_s >= 0.0) {
        return Err(SignalError::NegativeDeadTime(dead_time_s));
    }
    let rate = signal.sample_rate_hz;
    // In samples, with slack so a gap of exactly the dead time is not lost
    // to rounding.
    let dead = dead_time_s * rate - DEAD_TIME_SLACK;
    let mut events: Vec<SpikeEvent> = Vec::new();
    let mut last_emitted: Option<usize> = None;
    // (onset, trough index, trough value) of the open excursion.
    let mut run: Option<(usize, usize, f64)> = None;

    let mut close = |(onset, idx, peak): (usize, usize, f64), events: &mut Vec<SpikeEvent>| {
        if peak >= threshold {
            return;
        }
        if last_emitted.is_none_or(|last| onset as f64 - last as f64 >= dead) {
            events.push(SpikeEvent {
                electrode_id: signal.channel_id,
                time_s: idx as f64 / rate,
                peak_amplitude: peak,
            });
            last_emitted = Some(idx);
        }
    };

    for (i, &x) in signal.samples.iter().enumerate() {
        if x < 0.0 {
            match &mut run {
                Some((_, idx, v)) => {
                    if x < *v {
                        (*idx, *v) = (i, x);
                    }
                }
                None => run = Some((i, i, x)),
            }
        } else if let Some(r) = run.take() {
            close(r, &mut events);
        }
    }
    if let Some(r) = run {
        close(r, &mut events);
    }
    Ok(events)
}

/// The headstage chain for one channel in microvolts: band-pass (clamped to
/// the channel rate), robust noise estimate, whitening, and detection at
/// `threshold_uv` expressed on the filtered signal. Event peaks are reported
/// back in microvolts.
pub fn condition_and_detect(
    signal_uv: &Signal,
    threshold_uv: f64,
    dead_time_s: f64,
) -> Result<Vec<SpikeEvent>, SignalError> {
    if !(threshold_uv < 0.0) {
        return Err(SignalError::NonNegativeThreshold(threshold_uv));
    }
    let filtered = bandpass_filter(signal_uv, Band::for_rate(signal_uv.sample_rate_hz))?;
    let sigma = if filtered.len() >= MIN_NOISE_SAMPLES {
        estimate_noise_sigma(&filtered)?
    } else {
        0.0
    };
    if sigma <= 0.0 {
        return detect_spikes(&filtered, threshold_uv, dead_time_s);
    }
    let white = whiten(&filtered, sigma)?;
    let mut events = detect_spikes(&white, threshold_uv / sigma, dead_time_s)?;
    for e in &mut events {
        e.peak_amplitude *= sigma;
    }
    Ok(events)
}
