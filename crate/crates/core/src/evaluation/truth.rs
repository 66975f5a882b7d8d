use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::signal::SpikeEvent;

/// Default merge window for simultaneous spikes and default match window.
pub const DEFAULT_WINDOW_S: f64 = 0.5e-3;

/// Spike times of one neuron and the electrodes its waveform is visible on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronSpikeTrain {
    pub neuron_id: u32,
    pub spike_times_s: Vec<f64>,
    pub footprint: BTreeSet<u32>,
}

/// Electrode-level ground truth: merged event times, ascending.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeGroundTruth {
    pub electrode_id: u32,
    pub event_times_s: Vec<f64>,
}

/// Union of the spike times of every neuron whose footprint covers
/// `electrode`; events closer than `merge_window_s` to the previous kept event
/// collapse into it.
pub fn project_ground_truth(trains: &[NeuronSpikeTrain], electrode: u32, merge_window_s: f64) -> ElectrodeGroundTruth {
    let mut times: Vec<f64> = trains
        .iter()
        .filter(|t| t.footprint.contains(&electrode))
        .flat_map(|t| t.spike_times_s.iter().copied())
        .collect();
    times.sort_by(f64::total_cmp);
    let mut merged: Vec<f64> = Vec::with_capacity(times.len());
    for t in times {
        match merged.last() {
            Some(&last) if t - last <= merge_window_s => {}
            _ => merged.push(t),
        }
    }
    ElectrodeGroundTruth {
        electrode_id: electrode,
        event_times_s: merged,
    }
}

/// Match outcome for one electrode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub n_true: usize,
    pub n_detected: usize,
    pub n_matched: usize,
    pub fnr: f64,
    pub fpr: f64,
    pub sde: f64,
}

impl DetectionReport {
    pub fn from_counts(n_true: usize, n_detected: usize, n_matched: usize) -> Self {
        let denom = n_true.max(1) as f64;
        let fnr = (n_true - n_matched) as f64 / denom;
        let fpr = ((n_detected - n_matched) as f64 / denom).min(1.0);
        Self {
            n_true,
            n_detected,
            n_matched,
            fnr,
            fpr,
            sde: fnr + fpr,
        }
    }

    /// Pools raw counts over several reports.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a DetectionReport>) -> Self {
        let (t, d, m) = reports.into_iter().fold((0, 0, 0), |(t, d, m), r| {
            (t + r.n_true, d + r.n_detected, m + r.n_matched)
        });
        Self::from_counts(t, d, m)
    }
}

/// Greedy one-to-one matching: detections are visited in time order and each
/// takes the nearest still-unmatched truth event within `±window_s`.
pub fn match_events(truth: &ElectrodeGroundTruth, detected: &[SpikeEvent], window_s: f64) -> DetectionReport {
    let truth_t = &truth.event_times_s;
    let mut used = vec![false; truth_t.len()];
    let mut order: Vec<f64> = detected.iter().map(|e| e.time_s).collect();
    order.sort_by(f64::total_cmp);
    // Tolerance for times that sit exactly on the window edge after float math.
    let w = window_s * (1.0 + 1e-9);
    let mut matched = 0;
    for t in order {
        let lo = truth_t.partition_point(|&x| x < t - w);
        let mut best: Option<(usize, f64)> = None;
        for (i, &x) in truth_t.iter().enumerate().skip(lo) {
            if x > t + w {
                break;
            }
            let d = (x - t).abs();
            if !used[i] && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
            matched += 1;
        }
    }
    DetectionReport::from_counts(truth_t.len(), detected.len(), matched)
}
