//! Digitize-then-compress comparators: block DCT with coefficient truncation
//! and compressive sensing with greedy sparse recovery. Both consume the
//! full-rate signal.

mod cs;
mod dct;

pub use cs::{cs_compress, cs_decompress, CsCodec, CsConfig};
pub use dct::{dct_compress, dct_decompress, DctBasis, DctCodec, DctConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::signal::{NeuralTrace, Signal, SignalError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("block has {got} samples, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("malformed coefficient indices: {0}")]
    MalformedIndices(String),
    #[error("invalid baseline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<(), BaselineError> {
    if expected == got {
        Ok(())
    } else {
        Err(BaselineError::LengthMismatch { expected, got })
    }
}

/// A baseline operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum Baseline {
    Dct(DctConfig),
    Cs(CsConfig),
}

impl Baseline {
    pub fn scheme(&self) -> &'static str {
        match self {
            Baseline::Dct(_) => "dct",
            Baseline::Cs(_) => "cs",
        }
    }

    /// Short operating-point label, e.g. `N128_K16`.
    pub fn label(&self) -> String {
        match self {
            Baseline::Dct(c) => format!("N{}_K{}", c.block_len, c.keep_k),
            Baseline::Cs(c) => format!("N{}_M{}_k{}", c.block_len, c.n_measurements, c.sparsity_k),
        }
    }

    /// Default sweeps: DCT keeping 8/16/32 of 128, CS with 16/32/64 of 128.
    pub fn default_sweep(sensing_seed: u64) -> Vec<Baseline> {
        let mut v: Vec<Baseline> = [8, 16, 32]
            .iter()
            .map(|&k| {
                Baseline::Dct(DctConfig {
                    block_len: 128,
                    keep_k: k,
                })
            })
            .collect();
        v.extend(
            [16, 32, 64]
                .iter()
                .map(|&m| Baseline::Cs(CsConfig::with_measurements(128, m, sensing_seed))),
        );
        v
    }

    fn block_len(&self) -> usize {
        match self {
            Baseline::Dct(c) => c.block_len,
            Baseline::Cs(c) => c.block_len,
        }
    }
}

/// Result of pushing one trace through a baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutput {
    /// Receiver-side reconstruction per channel, µV, full rate.
    pub reconstructed: Vec<Signal>,
    pub transmitted_bits: u64,
    /// Samples digitized: always every full-rate sample.
    pub digitized_samples: u64,
}

enum Codec {
    Dct(DctCodec),
    Cs(CsCodec),
}

impl Codec {
    fn roundtrip(&self, block: &[f64]) -> Result<Vec<f64>, BaselineError> {
        match self {
            Codec::Dct(c) => {
                let (i, v) = c.compress(block)?;
                c.decompress(&i, &v)
            }
            Codec::Cs(c) => c.decompress(&c.compress(block)?),
        }
    }

    fn block_bits(&self) -> u64 {
        match self {
            Codec::Dct(c) => c.block_bits(),
            Codec::Cs(c) => c.block_bits(),
        }
    }
}

/// Compresses and reconstructs every channel of a full-rate trace block by
/// block; a trailing partial block is zero-padded and transmitted whole.
pub fn process_trace(
    trace: &NeuralTrace,
    baseline: &Baseline,
    exec: Execution,
) -> Result<BaselineOutput, BaselineError> {
    let codec = match baseline {
        Baseline::Dct(c) => Codec::Dct(DctCodec::new(*c)?),
        Baseline::Cs(c) => Codec::Cs(CsCodec::new(*c)?),
    };
    let n = baseline.block_len();
    let mut reconstructed = Vec::with_capacity(trace.n_channels());
    let mut bits = 0u64;
    let mut digitized = 0u64;
    for id in trace.channel_ids() {
        let s = trace.signal_uv(id)?;
        let blocks: Vec<Vec<f64>> = s
            .samples
            .chunks(n)
            .map(|c| {
                let mut b = c.to_vec();
                b.resize(n, 0.0);
                b
            })
            .collect();
        bits += blocks.len() as u64 * codec.block_bits();
        digitized += s.samples.len() as u64;
        let out = exec::map(exec, &blocks, |b| codec.roundtrip(b))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let mut samples: Vec<f64> = out.into_iter().flatten().collect();
        samples.truncate(s.samples.len());
        reconstructed.push(Signal::new(id, s.sample_rate_hz, samples));
    }
    Ok(BaselineOutput {
        reconstructed,
        transmitted_bits: bits,
        digitized_samples: digitized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Channel;

    fn trace() -> NeuralTrace {
        let ch = |id: u32| Channel {
            id,
            sample_rate_hz: 30_000.0,
            samples: (0..300).map(|i| ((i * (id as i32 + 3)) % 41 - 20) as i16).collect(),
        };
        NeuralTrace::new(vec![ch(0), ch(1)], 0.5).unwrap()
    }

    #[test]
    fn lossless_dct_reproduces_trace_and_counts_everything() {
        let t = trace();
        let out = process_trace(
            &t,
            &Baseline::Dct(DctConfig {
                block_len: 64,
                keep_k: 64,
            }),
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(out.digitized_samples, 600);
        // 5 blocks per channel (last one padded), 64 coefficients of 22 bits.
        assert_eq!(out.transmitted_bits, 2 * 5 * 64 * 22);
        for (id, r) in t.channel_ids().into_iter().zip(&out.reconstructed) {
            let s = t.signal_uv(id).unwrap();
            assert_eq!(r.samples.len(), s.samples.len());
            for (a, b) in s.samples.iter().zip(&r.samples) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let t = trace();
        let b = Baseline::Cs(CsConfig::with_measurements(64, 16, 5));
        let p = process_trace(&t, &b, Execution::Parallel).unwrap();
        let s = process_trace(&t, &b, Execution::Sequential).unwrap();
        assert_eq!(p, s);
        assert_eq!(p.transmitted_bits, 2 * 5 * 16 * 16);
    }

    #[test]
    fn sweep_labels() {
        let s = Baseline::default_sweep(0);
        assert_eq!(s.len(), 6);
        assert_eq!(s[0].label(), "N128_K8");
        assert_eq!(s[5].label(), "N128_M64_k16");
        assert_eq!(s[3].scheme(), "cs");
    }
}
