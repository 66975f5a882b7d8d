use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SignalError;

/// Fixed template length in samples at the base rate (about 2 ms at 30 kHz).
pub const TEMPLATE_LEN: usize = 61;

/// One channel of ADC counts at its own sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub id: u32,
    pub sample_rate_hz: f64,
    pub samples: Vec<i16>,
}

impl Channel {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

/// Multi-channel digitized recording. Channels may run at different rates
/// once adaptive acquisition has been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralTrace {
    channels: Vec<Channel>,
    uv_per_count: f64,
}

impl NeuralTrace {
    pub fn new(channels: Vec<Channel>, uv_per_count: f64) -> Result<Self, SignalError> {
        if !(uv_per_count > 0.0 && uv_per_count.is_finite()) {
            return Err(SignalError::InvalidScale(uv_per_count));
        }
        let mut seen = HashSet::new();
        for ch in &channels {
            if !(ch.sample_rate_hz > 0.0 && ch.sample_rate_hz.is_finite()) {
                return Err(SignalError::NonPositiveRate(ch.sample_rate_hz));
            }
            if !seen.insert(ch.id) {
                return Err(SignalError::DuplicateChannel(ch.id));
            }
        }
        if let Some(first) = channels.first() {
            let duration = first.duration_s();
            for ch in &channels[1..] {
                let expected = duration * ch.sample_rate_hz;
                if (ch.samples.len() as f64 - expected).abs() > 1.0 + 1e-9 {
                    return Err(SignalError::DurationMismatch {
                        channel: ch.id,
                        samples: ch.samples.len(),
                        expected,
                    });
                }
            }
        }
        Ok(Self { channels, uv_per_count })
    }

    /// Builds a uniform-rate trace from per-channel count vectors, ids `0..n`.
    pub fn uniform(samples: Vec<Vec<i16>>, sample_rate_hz: f64, uv_per_count: f64) -> Result<Self, SignalError> {
        let channels = samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| Channel {
                id: i as u32,
                sample_rate_hz,
                samples: s,
            })
            .collect();
        Self::new(channels, uv_per_count)
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn uv_per_count(&self) -> f64 {
        self.uv_per_count
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_ids(&self) -> Vec<u32> {
        self.channels.iter().map(|c| c.id).collect()
    }

    pub fn channel(&self, id: u32) -> Result<&Channel, SignalError> {
        self.channels
            .iter()
            .find(|c| c.id == id)
            .ok_or(SignalError::UnknownChannel(id))
    }

    pub fn duration_s(&self) -> f64 {
        self.channels.first().map_or(0.0, Channel::duration_s)
    }

    /// Channel converted to microvolts.
    pub fn signal_uv(&self, id: u32) -> Result<Signal, SignalError> {
        let ch = self.channel(id)?;
        Ok(Signal {
            channel_id: ch.id,
            sample_rate_hz: ch.sample_rate_hz,
            samples: ch.samples.iter().map(|&s| f64::from(s) * self.uv_per_count).collect(),
        })
    }

    /// Sub-range `[start_s, end_s)` of every channel, at each channel's own rate.
    pub fn slice_time(&self, start_s: f64, end_s: f64) -> NeuralTrace {
        let channels = self
            .channels
            .iter()
            .map(|c| {
                let a = ((start_s * c.sample_rate_hz).round() as usize).min(c.samples.len());
                let b = ((end_s * c.sample_rate_hz).round() as usize).clamp(a, c.samples.len());
                Channel {
                    id: c.id,
                    sample_rate_hz: c.sample_rate_hz,
                    samples: c.samples[a..b].to_vec(),
                }
            })
            .collect();
        NeuralTrace {
            channels,
            uv_per_count: self.uv_per_count,
        }
    }

    /// Writes the channel-interleaved little-endian i16 binary plus its JSON sidecar.
    /// All channels must share one rate and length.
    pub fn write_interleaved(&self, bin_path: &Path, meta_path: &Path) -> Result<(), SignalError> {
        let Some(first) = self.channels.first() else {
            return Err(SignalError::Empty);
        };
        let n = first.samples.len();
        if self
            .channels
            .iter()
            .any(|c| c.samples.len() != n || c.sample_rate_hz != first.sample_rate_hz)
        {
            return Err(SignalError::NotUniform);
        }
        let mut w = BufWriter::new(fs::File::create(bin_path)?);
        for i in 0..n {
            for c in &self.channels {
                w.write_all(&c.samples[i].to_le_bytes())?;
            }
        }
        w.flush()?;
        let meta = TraceMeta {
            n_channels: self.channels.len(),
            sample_rate_hz: first.sample_rate_hz,
            uv_per_count: self.uv_per_count,
            channel_ids: Some(self.channel_ids()),
        };
        fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read_interleaved(bin_path: &Path, meta_path: &Path) -> Result<Self, SignalError> {
        let meta: TraceMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
        let bytes = fs::read(bin_path)?;
        let frame = meta.n_channels * 2;
        if meta.n_channels == 0 || bytes.len() % frame != 0 {
            return Err(SignalError::MalformedBinary {
                len: bytes.len(),
                n_channels: meta.n_channels,
            });
        }
        let n = bytes.len() / frame;
        let mut samples = vec![Vec::with_capacity(n); meta.n_channels];
        for chunk in bytes.chunks_exact(frame) {
            for (c, pair) in chunk.chunks_exact(2).enumerate() {
                samples[c].push(i16::from_le_bytes([pair[0], pair[1]]));
            }
        }
        let ids = meta
            .channel_ids
            .unwrap_or_else(|| (0..meta.n_channels as u32).collect());
        if ids.len() != meta.n_channels {
            return Err(SignalError::MalformedBinary {
                len: bytes.len(),
                n_channels: meta.n_channels,
            });
        }
        let channels = ids
            .into_iter()
            .zip(samples)
            .map(|(id, samples)| Channel {
                id,
                sample_rate_hz: meta.sample_rate_hz,
                samples,
            })
            .collect();
        Self::new(channels, meta.uv_per_count)
    }
}

/// Sidecar metadata for the interleaved binary format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    pub n_channels: usize,
    pub sample_rate_hz: f64,
    pub uv_per_count: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_ids: Option<Vec<u32>>,
}

/// Single-channel real-valued signal. Units depend on the stage: microvolts
/// after conversion and filtering, noise sigmas after whitening.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub channel_id: u32,
    pub sample_rate_hz: f64,
    pub samples: Vec<f64>,
}

impl Signal {
    pub fn new(channel_id: u32, sample_rate_hz: f64, samples: Vec<f64>) -> Self {
        Self {
            channel_id,
            sample_rate_hz,
            samples,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Rounds microvolts to ADC counts, saturating at the i16 range.
pub fn quantize(samples_uv: &[f64], uv_per_count: f64) -> Vec<i16> {
    samples_uv
        .iter()
        .map(|&v| (v / uv_per_count).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
        .collect()
}

/// Canonical per-electrode spike waveform in microvolts at the base rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeTemplate {
    pub electrode_id: u32,
    pub waveform: Vec<f64>,
    pub base_rate_hz: f64,
}

impl SpikeTemplate {
    /// Center-crops or zero-pads `waveform` to [`TEMPLATE_LEN`].
    pub fn new(electrode_id: u32, waveform: &[f64], base_rate_hz: f64) -> Result<Self, SignalError> {
        if !(base_rate_hz > 0.0) {
            return Err(SignalError::NonPositiveRate(base_rate_hz));
        }
        let fitted = fit_center(waveform, TEMPLATE_LEN);
        if !fitted.iter().any(|v| v.abs() > 0.0) {
            return Err(SignalError::DegenerateTemplate(electrode_id));
        }
        Ok(Self {
            electrode_id,
            waveform: fitted,
            base_rate_hz,
        })
    }

    pub fn peak_magnitude(&self) -> f64 {
        self.waveform.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Index of the most negative sample; spike times refer to this sample.
    pub fn trough_index(&self) -> usize {
        self.waveform
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) },
            )
            .0
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.waveform.len() != TEMPLATE_LEN {
            return Err(SignalError::TemplateLength(self.waveform.len()));
        }
        if !self.waveform.iter().any(|v| v.abs() > 0.0) {
            return Err(SignalError::DegenerateTemplate(self.electrode_id));
        }
        Ok(())
    }
}

fn fit_center(src: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    if src.len() >= len {
        let off = (src.len() - len) / 2;
        out.copy_from_slice(&src[off..off + len]);
    } else {
        let off = (len - src.len()) / 2;
        out[off..off + src.len()].copy_from_slice(src);
    }
    out
}

/// A detected threshold crossing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub electrode_id: u32,
    pub time_s: f64,
    pub peak_amplitude: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_ids_and_bad_scale() {
        let ch = Channel {
            id: 3,
            sample_rate_hz: 1000.0,
            samples: vec![0; 10],
        };
        assert!(matches!(
            NeuralTrace::new(vec![ch.clone(), ch.clone()], 0.195),
            Err(SignalError::DuplicateChannel(3))
        ));
        assert!(matches!(
            NeuralTrace::new(vec![ch], 0.0),
            Err(SignalError::InvalidScale(_))
        ));
    }

    #[test]
    fn mixed_rates_must_share_duration() {
        let a = Channel {
            id: 0,
            sample_rate_hz: 30_000.0,
            samples: vec![0; 1000],
        };
        let ok = Channel {
            id: 1,
            sample_rate_hz: 10_000.0,
            samples: vec![0; 334],
        };
        let bad = Channel {
            id: 2,
            sample_rate_hz: 10_000.0,
            samples: vec![0; 300],
        };
        assert!(NeuralTrace::new(vec![a.clone(), ok], 1.0).is_ok());
        assert!(matches!(
            NeuralTrace::new(vec![a, bad], 1.0),
            Err(SignalError::DurationMismatch { channel: 2, .. })
        ));
    }

    #[test]
    fn template_is_cropped_and_padded_around_center() {
        let long: Vec<f64> = (0..81).map(|i| i as f64).collect();
        let t = SpikeTemplate::new(0, &long, 30_000.0).unwrap();
        assert_eq!(t.waveform.len(), TEMPLATE_LEN);
        assert_eq!(t.waveform[0], 10.0);
        let short = vec![-1.0; 11];
        let t = SpikeTemplate::new(0, &short, 30_000.0).unwrap();
        assert_eq!(t.waveform[24], 0.0);
        assert_eq!(t.waveform[25], -1.0);
        assert_eq!(t.waveform[35], -1.0);
        assert_eq!(t.waveform[36], 0.0);
        assert!(matches!(
            SpikeTemplate::new(7, &[0.0; 61], 30_000.0),
            Err(SignalError::DegenerateTemplate(7))
        ));
    }

    #[test]
    fn interleaved_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let trace = NeuralTrace::uniform(vec![vec![1, -2, 3], vec![i16::MIN, 0, i16::MAX]], 30_000.0, 0.195).unwrap();
        let bin = dir.path().join("t.bin");
        let meta = dir.path().join("t.json");
        trace.write_interleaved(&bin, &meta).unwrap();
        let bytes = std::fs::read(&bin).unwrap();
        assert_eq!(&bytes[..4], &[1, 0, 0x00, 0x80]);
        assert_eq!(NeuralTrace::read_interleaved(&bin, &meta).unwrap(), trace);
    }
}
