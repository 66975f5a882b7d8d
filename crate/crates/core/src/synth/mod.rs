//! Synthetic recordings: parametric spike templates, refractory Poisson
//! trains and a multi-electrode dataset with known ground truth.

mod waveform;

pub use waveform::{add_waveform, spike_times, template_bank, BiphasicShape, TROUGH_INDEX};

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{project_ground_truth, ElectrodeGroundTruth, NeuronSpikeTrain, DEFAULT_WINDOW_S};
use crate::exec::{self, Execution};
use crate::signal::{quantize, Channel, NeuralTrace, SignalError, SpikeTemplate, TraceMeta};

pub const DEFAULT_BASE_RATE_HZ: f64 = 30_000.0;
pub const DEFAULT_UV_PER_COUNT: f64 = 0.195;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_electrodes: u32,
    pub duration_s: f64,
    pub base_rate_hz: f64,
    pub noise_sigma_uv: f64,
    pub firing_rate_hz: f64,
    pub amplitude_range_uv: (f64, f64),
    /// Neurons visible on two neighbouring electrodes, in addition to one
    /// neuron per electrode.
    pub shared_neurons: u32,
    pub shared_rate_hz: f64,
    /// Depth of a shared neuron relative to the electrode's own unit.
    pub shared_gain: f64,
    pub min_isi_s: f64,
    pub edge_margin_s: f64,
    pub uv_per_count: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_electrodes: 32,
            duration_s: 10.0,
            base_rate_hz: DEFAULT_BASE_RATE_HZ,
            noise_sigma_uv: 5.0,
            firing_rate_hz: 20.0,
            amplitude_range_uv: (20.0, 300.0),
            shared_neurons: 2,
            shared_rate_hz: 5.0,
            shared_gain: 1.5,
            min_isi_s: 2e-3,
            edge_margin_s: 10e-3,
            uv_per_count: DEFAULT_UV_PER_COUNT,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_electrodes == 0 || self.n_electrodes > 255 {
            return bad("n_electrodes must be in 1..=255");
        }
        if !(self.duration_s >= 0.0 && self.base_rate_hz > 0.0 && self.uv_per_count > 0.0) {
            return bad("duration, base rate and scale must be positive");
        }
        if !(self.noise_sigma_uv >= 0.0 && self.firing_rate_hz > 0.0 && self.shared_rate_hz > 0.0) {
            return bad("noise sigma must be non-negative and firing rates positive");
        }
        let (lo, hi) = self.amplitude_range_uv;
        if !(lo > 0.0 && lo <= hi) {
            return bad("amplitude range must be positive and ordered");
        }
        if self.shared_neurons > 0 && self.n_electrodes < 2 {
            return bad("shared neurons need at least two electrodes");
        }
        Ok(())
    }
}

/// Per-electrode unit description kept alongside the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitInfo {
    pub neuron_id: u32,
    pub electrode_id: u32,
    pub amplitude_uv: f64,
}

/// A synthetic recording with everything needed to score it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub trace: NeuralTrace,
    pub trains: Vec<NeuronSpikeTrain>,
    /// Weakest visible unit on each electrode, indexed by electrode.
    pub templates: Vec<SpikeTemplate>,
    pub units: Vec<UnitInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthDoc {
    config: SynthConfig,
    trains: Vec<NeuronSpikeTrain>,
    templates: Vec<SpikeTemplate>,
    units: Vec<UnitInfo>,
}

impl SyntheticDataset {
    pub fn generate(config: &SynthConfig, exec: Execution) -> Result<Self, SynthError> {
        config.validate()?;
        let n = config.n_electrodes as usize;
        let rate = config.base_rate_hz;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes: Vec<BiphasicShape> = (0..n)
            .map(|_| BiphasicShape::random(&mut rng, config.amplitude_range_uv))
            .collect();

        // (neuron, electrode, waveform) placements.
        let mut trains = Vec::new();
        let mut placements: Vec<(usize, u32, Vec<f64>)> = Vec::new();
        let mut units = Vec::new();
        for (e, shape) in shapes.iter().enumerate() {
            let times = spike_times(
                &mut rng,
                config.firing_rate_hz,
                config.duration_s,
                config.min_isi_s,
                config.edge_margin_s,
            );
            trains.push(NeuronSpikeTrain {
                neuron_id: e as u32,
                spike_times_s: times,
                footprint: BTreeSet::from([e as u32]),
            });
            placements.push((e, e as u32, shape.render(rate)));
            units.push(UnitInfo {
                neuron_id: e as u32,
                electrode_id: e as u32,
                amplitude_uv: shape.amplitude_uv,
            });
        }
        for s in 0..config.shared_neurons as usize {
            let e0 = rng.random_range(0..n - 1);
            let neuron = trains.len();
            let times = spike_times(
                &mut rng,
                config.shared_rate_hz,
                config.duration_s,
                config.min_isi_s,
                config.edge_margin_s,
            );
            let mut footprint = BTreeSet::new();
            for e in [e0, e0 + 1] {
                let mut shape = shapes[e];
                shape.amplitude_uv *= config.shared_gain;
                footprint.insert(e as u32);
                placements.push((neuron, e as u32, shape.render(rate)));
                units.push(UnitInfo {
                    neuron_id: neuron as u32,
                    electrode_id: e as u32,
                    amplitude_uv: shape.amplitude_uv,
                });
            }
            trains.push(NeuronSpikeTrain {
                neuron_id: (n + s) as u32,
                spike_times_s: times,
                footprint,
            });
        }

        let n_samples = (config.duration_s * rate).round() as usize;
        let noise_seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        let channels = exec::map_range(exec, n, |e| {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seeds[e]);
            let normal = Normal::new(0.0, config.noise_sigma_uv).expect("validated sigma");
            let mut buf: Vec<f64> = (0..n_samples).map(|_| normal.sample(&mut noise_rng)).collect();
            for (neuron, electrode, wave) in &placements {
                if *electrode as usize != e {
                    continue;
                }
                let align = trough(wave);
                for &t in &trains[*neuron].spike_times_s {
                    add_waveform(&mut buf, wave, align, (t * rate).round() as usize, 1.0);
                }
            }
            Channel {
                id: e as u32,
                sample_rate_hz: rate,
                samples: quantize(&buf, config.uv_per_count),
            }
        });
        let trace = NeuralTrace::new(channels, config.uv_per_count)?;

        let templates = (0..n)
            .map(|e| {
                let weakest = placements
                    .iter()
                    .filter(|(_, el, _)| *el as usize == e)
                    .min_by(|a, b| depth(&a.2).total_cmp(&depth(&b.2)))
                    .expect("every electrode has its own unit");
                SpikeTemplate::new(e as u32, &weakest.2, rate)
            })
            .collect::<Result<Vec<_>, _>>()?;

        Ok(Self {
            config: config.clone(),
            trace,
            trains,
            templates,
            units,
        })
    }

    pub fn electrode_ids(&self) -> Vec<u32> {
        self.trace.channel_ids()
    }

    pub fn ground_truth(&self, electrode: u32) -> ElectrodeGroundTruth {
        project_ground_truth(&self.trains, electrode, DEFAULT_WINDOW_S)
    }

    /// Writes `trace.bin`, `trace.json`, `truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        self.trace
            .write_interleaved(&dir.join("trace.bin"), &dir.join("trace.json"))?;
        let doc = TruthDoc {
            config: self.config.clone(),
            trains: self.trains.clone(),
            templates: self.templates.clone(),
            units: self.units.clone(),
        };
        let path = dir.join("truth.json");
        fs::write(&path, serde_json::to_vec_pretty(&doc)?).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(dir: &Path) -> Result<Self, SynthError> {
        let trace = NeuralTrace::read_interleaved(&dir.join("trace.bin"), &dir.join("trace.json"))?;
        let path = dir.join("truth.json");
        let bytes = fs::read(&path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let doc: TruthDoc = serde_json::from_slice(&bytes)?;
        if doc.templates.len() != trace.n_channels() {
            return Err(SynthError::InvalidConfig(format!(
                "{} templates for {} channels",
                doc.templates.len(),
                trace.n_channels()
            )));
        }
        for t in &doc.templates {
            t.validate()?;
        }
        Ok(Self {
            config: doc.config,
            trace,
            trains: doc.trains,
            templates: doc.templates,
            units: doc.units,
        })
    }

    /// Metadata of the written trace, for callers that only need the header.
    pub fn trace_meta(&self) -> TraceMeta {
        TraceMeta {
            n_channels: self.trace.n_channels(),
            sample_rate_hz: self.config.base_rate_hz,
            uv_per_count: self.config.uv_per_count,
            channel_ids: Some(self.trace.channel_ids()),
        }
    }
}

fn trough(w: &[f64]) -> usize {
    w.iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) },
        )
        .0
}

fn depth(w: &[f64]) -> f64 {
    -w.iter().cloned().fold(f64::INFINITY, f64::min)
}
