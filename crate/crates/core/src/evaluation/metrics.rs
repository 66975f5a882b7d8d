use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EvaluationError;
use crate::acquisition::AcquisitionCost;

/// Bits per raw ADC sample at full rate.
pub const RAW_SAMPLE_BITS: u64 = 16;

/// What a compression ratio is computed over.
#[derive(Clone, Copy, Debug)]
pub enum CrBasis<'a> {
    /// Full-rate sample count over executed sampling commands.
    Acquisition(&'a AcquisitionCost),
    /// Full-rate 16-bit payload over the bits actually transmitted.
    Transmission {
        full_rate_samples: u64,
        transmitted_bits: u64,
    },
}

pub fn compression_ratio(basis: CrBasis<'_>) -> Result<f64, EvaluationError> {
    match basis {
        CrBasis::Acquisition(cost) => {
            let executed = cost.total_executed();
            if executed == 0 {
                return Err(EvaluationError::ZeroDenominator("executed sampling commands"));
            }
            Ok(cost.full_rate_count() as f64 / executed as f64)
        }
        CrBasis::Transmission {
            full_rate_samples,
            transmitted_bits,
        } => {
            if transmitted_bits == 0 {
                return Err(EvaluationError::ZeroDenominator("transmitted bits"));
            }
            Ok((full_rate_samples * RAW_SAMPLE_BITS) as f64 / transmitted_bits as f64)
        }
    }
}

/// Decoder-facing corruption of a binary spike train: each spike is dropped
/// with probability `fnr`; each idle step turns into a spike with the
/// probability that makes the expected number of insertions `fpr * n_spikes`.
pub fn inject_errors(train: &[bool], fnr: f64, fpr: f64, seed: u64) -> Result<Vec<bool>, EvaluationError> {
    for (name, v) in [("fnr", fnr), ("fpr", fpr)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvaluationError::RateOutOfRange { name, value: v });
        }
    }
    let n_true = train.iter().filter(|&&b| b).count();
    let n_idle = train.len() - n_true;
    let p_insert = if n_idle == 0 {
        0.0
    } else {
        (fpr * n_true as f64 / n_idle as f64).min(1.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(train
        .iter()
        .map(|&b| {
            // One draw per step keeps the stream aligned regardless of rates.
            let u: f64 = rng.random();
            if b {
                u >= fnr
            } else {
                u < p_insert
            }
        })
        .collect())
}
