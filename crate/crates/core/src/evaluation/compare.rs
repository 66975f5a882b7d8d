use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{compression_ratio, CrBasis};
use super::truth::{match_events, DetectionReport, DEFAULT_WINDOW_S};
use super::EvaluationError;
use crate::acquisition::{acquire, AcquisitionCost, ClockPlan};
use crate::baselines::{process_trace, Baseline, CsConfig, DctConfig};
use crate::exec::{self, Execution};
use crate::optimizer::{ArrayGrid, ConfigVector, ElectrodeProfile, OptimizerSettings};
use crate::predictor::MlpModel;
use crate::signal::{condition_and_detect, NeuralTrace, Signal, SignalError, SpikeEvent, DEFAULT_DEAD_TIME_S};
use crate::synth::SyntheticDataset;
use crate::telemetry::EVENT_PACKET_LEN;

/// Runs the headstage detection chain on every signal with its own threshold.
pub fn detect_signals(
    signals: &[Signal],
    thresholds_uv: &[f64],
    dead_time_s: f64,
    exec: Execution,
) -> Result<Vec<Vec<SpikeEvent>>, SignalError> {
    assert_eq!(signals.len(), thresholds_uv.len(), "one threshold per signal");
    let jobs: Vec<(&Signal, f64)> = signals.iter().zip(thresholds_uv.iter().copied()).collect();
    exec::map(exec, &jobs, |(s, th)| {
        if s.is_empty() {
            Ok(Vec::new())
        } else {
            condition_and_detect(s, *th, dead_time_s)
        }
    })
    .into_iter()
    .collect()
}

/// As [`detect_signals`] for every channel of a trace, in channel order.
pub fn detect_channels(
    trace: &NeuralTrace,
    thresholds_uv: &[f64],
    dead_time_s: f64,
    exec: Execution,
) -> Result<Vec<Vec<SpikeEvent>>, SignalError> {
    let signals = trace
        .channel_ids()
        .into_iter()
        .map(|id| trace.signal_uv(id))
        .collect::<Result<Vec<_>, _>>()?;
    detect_signals(&signals, thresholds_uv, dead_time_s, exec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Full rate everywhere.
    Raw,
    /// Budgeted per-electrode rates.
    Adaptive,
    /// One factor for every electrode.
    Uniform,
    Dct,
    Cs,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Raw, Scheme::Adaptive, Scheme::Uniform, Scheme::Dct, Scheme::Cs];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Raw => "raw",
            Scheme::Adaptive => "adaptive",
            Scheme::Uniform => "uniform",
            Scheme::Dct => "dct",
            Scheme::Cs => "cs",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown scheme '{s}' (expected one of raw, adaptive, uniform, dct, cs)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonSettings {
    pub schemes: Vec<Scheme>,
    pub optimizer: OptimizerSettings,
    /// Budgets for the adaptive scheme's own rows.
    pub epsilons: Vec<f64>,
    /// Factors for uniform rows; the adaptive scheme also gets one row
    /// matched to each of their compression ratios.
    pub uniform_factors: Vec<u32>,
    pub dct_block_len: usize,
    pub dct_keep: Vec<usize>,
    pub cs_block_len: usize,
    pub cs_measurements: Vec<usize>,
    pub sensing_seed: u64,
    pub dead_time_s: f64,
    pub match_window_s: f64,
}

impl Default for ComparisonSettings {
    fn default() -> Self {
        Self {
            schemes: Scheme::ALL.to_vec(),
            optimizer: OptimizerSettings::default(),
            epsilons: vec![0.05, 0.10],
            uniform_factors: vec![2, 4],
            dct_block_len: 128,
            dct_keep: vec![8, 16, 32],
            cs_block_len: 128,
            cs_measurements: vec![16, 32, 64],
            sensing_seed: 0,
            dead_time_s: DEFAULT_DEAD_TIME_S,
            match_window_s: DEFAULT_WINDOW_S,
        }
    }
}

impl ComparisonSettings {
    pub fn baselines(&self) -> Vec<Baseline> {
        let mut out = Vec::new();
        if self.schemes.contains(&Scheme::Dct) {
            out.extend(self.dct_keep.iter().map(|&k| {
                Baseline::Dct(DctConfig {
                    block_len: self.dct_block_len,
                    keep_k: k,
                })
            }));
        }
        if self.schemes.contains(&Scheme::Cs) {
            out.extend(
                self.cs_measurements
                    .iter()
                    .map(|&m| Baseline::Cs(CsConfig::with_measurements(self.cs_block_len, m, self.sensing_seed))),
            );
        }
        out
    }
}

/// One (scheme, operating point) row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scheme: Scheme,
    pub config: String,
    pub cr_acq: f64,
    pub cr_tx: f64,
    /// Means over electrodes.
    pub fnr: f64,
    pub fpr: f64,
    pub sde: f64,
    /// ADC sampling commands executed (all samples, for the baselines).
    pub executed_ops: u64,
    pub electrodes: Vec<DetectionReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub full_rate_samples: u64,
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    pub fn row(&self, scheme: Scheme, config: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.config == config)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "scheme,config,cr_acq,cr_tx,fnr,fpr,sde,executed_ops")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.scheme, r.config, r.cr_acq, r.cr_tx, r.fnr, r.fpr, r.sde, r.executed_ops
            )?;
        }
        Ok(())
    }

    /// Structural cost contrast: every acquisition-side row executes exactly
    /// `full_rate / cr_acq` commands, and every baseline digitizes all
    /// `full_rate` samples (acquisition ratio 1). Returns the violations.
    pub fn cost_contrast_violations(&self) -> Vec<String> {
        let full = self.full_rate_samples as f64;
        let mut bad = Vec::new();
        for r in &self.rows {
            let expected = match r.scheme {
                Scheme::Dct | Scheme::Cs => {
                    if r.cr_acq != 1.0 {
                        bad.push(format!(
                            "{} {}: baseline acquisition ratio {}",
                            r.scheme, r.config, r.cr_acq
                        ));
                    }
                    full
                }
                _ => full / r.cr_acq,
            };
            if (r.executed_ops as f64 - expected).abs() > 1e-9 * full {
                bad.push(format!(
                    "{} {}: executed {} but full rate / cr = {}",
                    r.scheme, r.config, r.executed_ops, expected
                ));
            }
        }
        bad
    }
}

fn summarize(
    scheme: Scheme,
    config: String,
    reports: Vec<DetectionReport>,
    cr_acq: f64,
    tx_bits: u64,
    full_rate: u64,
    executed: u64,
) -> ReportRow {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&DetectionReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let cr_tx = compression_ratio(CrBasis::Transmission {
        full_rate_samples: full_rate,
        transmitted_bits: tx_bits,
    })
    .unwrap_or(f64::INFINITY);
    ReportRow {
        scheme,
        config,
        cr_acq,
        cr_tx,
        fnr: mean(|r| r.fnr),
        fpr: mean(|r| r.fpr),
        sde: mean(|r| r.sde),
        executed_ops: executed,
        electrodes: reports,
    }
}

/// Acquires, detects and scores the dataset under one config vector.
pub fn evaluate_config(
    dataset: &SyntheticDataset,
    cv: &ConfigVector,
    plan: &ClockPlan,
    dead_time_s: f64,
    match_window_s: f64,
    exec: Execution,
) -> Result<(Vec<DetectionReport>, AcquisitionCost, usize), EvaluationError> {
    let schedules = cv.schedules();
    let (acquired, cost) = acquire(&dataset.trace, &schedules, plan, exec)?;
    let thresholds: Vec<f64> = schedules.iter().map(|s| s.threshold_uv).collect();
    let detected = detect_channels(&acquired, &thresholds, dead_time_s, exec)?;
    let n_events = detected.iter().map(Vec::len).sum();
    let reports = dataset
        .electrode_ids()
        .iter()
        .zip(&detected)
        .map(|(&id, ev)| match_events(&dataset.ground_truth(id), ev, match_window_s))
        .collect();
    Ok((reports, cost, n_events))
}

/// Processes the dataset end to end under each requested scheme and
/// operating point, with the same detection settings on every output.
pub fn run_comparison(
    dataset: &SyntheticDataset,
    model: &MlpModel,
    settings: &ComparisonSettings,
    plan: &ClockPlan,
    exec: Execution,
) -> Result<ComparisonReport, EvaluationError> {
    if settings.schemes.is_empty() {
        return Err(EvaluationError::NoSchemes);
    }
    let profiles = ElectrodeProfile::from_trace(&dataset.trace, &dataset.templates)?;
    let grid = ArrayGrid::evaluate(&profiles, model, &settings.optimizer, exec)?;
    let full_rate: u64 = dataset.trace.channels().iter().map(|c| c.samples.len() as u64).sum();
    let event_bits = (EVENT_PACKET_LEN * 8) as u64;

    let mut configs: Vec<(Scheme, String, ConfigVector)> = Vec::new();
    let mut schemes = settings.schemes.clone();
    schemes.sort();
    schemes.dedup();
    for &scheme in &schemes {
        match scheme {
            Scheme::Raw => configs.push((scheme, "x1".into(), grid.uniform(1, plan, 0)?)),
            Scheme::Adaptive => {
                for &eps in &settings.epsilons {
                    configs.push((scheme, format!("eps{eps}"), grid.select(eps, plan, 0)?));
                }
                for &x in &settings.uniform_factors {
                    let (cv, eps) = grid.match_compression(f64::from(x), plan, 0)?;
                    log::info!(
                        "adaptive matched to x{x}: budget {eps:.4}, ratio {:.3}",
                        cv.compression_ratio()
                    );
                    configs.push((scheme, format!("match_x{x}"), cv));
                }
            }
            Scheme::Uniform => {
                for &x in &settings.uniform_factors {
                    configs.push((scheme, format!("x{x}"), grid.uniform(x, plan, 0)?));
                }
            }
            Scheme::Dct | Scheme::Cs => {}
        }
    }

    let mut rows = Vec::new();
    for (scheme, label, cv) in &configs {
        let (reports, cost, n_events) =
            evaluate_config(dataset, cv, plan, settings.dead_time_s, settings.match_window_s, exec)?;
        let cr_acq = compression_ratio(CrBasis::Acquisition(&cost))?;
        rows.push(summarize(
            *scheme,
            label.clone(),
            reports,
            cr_acq,
            n_events as u64 * event_bits,
            full_rate,
            cost.total_executed(),
        ));
    }

    // Baselines detect at full rate with the raw scheme's thresholds.
    let baselines = settings.baselines();
    if !baselines.is_empty() {
        let reference = grid.uniform(1, plan, 0)?;
        let thresholds: Vec<f64> = reference.schedules().iter().map(|s| s.threshold_uv).collect();
        for b in &baselines {
            let out = process_trace(&dataset.trace, b, exec)?;
            let detected = detect_signals(&out.reconstructed, &thresholds, settings.dead_time_s, exec)?;
            let reports = dataset
                .electrode_ids()
                .iter()
                .zip(&detected)
                .map(|(&id, ev)| match_events(&dataset.ground_truth(id), ev, settings.match_window_s))
                .collect();
            let scheme = if matches!(b, Baseline::Dct(_)) {
                Scheme::Dct
            } else {
                Scheme::Cs
            };
            rows.push(summarize(
                scheme,
                b.label(),
                reports,
                1.0,
                out.transmitted_bits,
                full_rate,
                out.digitized_samples,
            ));
        }
    }
    Ok(ComparisonReport {
        full_rate_samples: full_rate,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::FactorSet;
    use crate::predictor::INPUT_DIM;
    use crate::synth::SynthConfig;

    fn constant_model(bias: f64) -> MlpModel {
        let mut m = MlpModel::predictor(INPUT_DIM, 0);
        let last = m.layers().len() - 1;
        for (i, layer) in m.layers_mut().iter_mut().enumerate() {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            if i == last {
                layer.biases.iter_mut().for_each(|b| *b = bias);
            }
        }
        m
    }

    fn dataset() -> SyntheticDataset {
        SyntheticDataset::generate(
            &SynthConfig {
                n_electrodes: 4,
                duration_s: 2.0,
                seed: 11,
                ..Default::default()
            },
            Execution::Parallel,
        )
        .unwrap()
    }

    #[test]
    fn scheme_names_roundtrip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("wavelet".parse::<Scheme>().is_err());
    }

    #[test]
    fn empty_scheme_list_is_rejected() {
        let s = ComparisonSettings {
            schemes: vec![],
            ..Default::default()
        };
        let r = run_comparison(
            &dataset(),
            &constant_model(0.0),
            &s,
            &ClockPlan::default(),
            Execution::Parallel,
        );
        assert!(matches!(r, Err(EvaluationError::NoSchemes)));
    }

    #[test]
    fn degenerate_settings_reproduce_the_raw_row() {
        let ds = dataset();
        let s = ComparisonSettings {
            optimizer: OptimizerSettings {
                factor_set: FactorSet::new(vec![1]).unwrap(),
                ..Default::default()
            },
            epsilons: vec![0.05],
            uniform_factors: vec![],
            dct_keep: vec![128],
            schemes: vec![Scheme::Raw, Scheme::Adaptive, Scheme::Dct],
            ..Default::default()
        };
        let report = run_comparison(
            &ds,
            &constant_model(-40.0),
            &s,
            &ClockPlan::default(),
            Execution::Parallel,
        )
        .unwrap();
        let raw = report.row(Scheme::Raw, "x1").unwrap();
        let adaptive = report.row(Scheme::Adaptive, "eps0.05").unwrap();
        let dct = report.row(Scheme::Dct, "N128_K128").unwrap();
        assert_eq!(raw.cr_acq, 1.0);
        assert_eq!(adaptive.electrodes, raw.electrodes);
        assert_eq!(adaptive.executed_ops, raw.executed_ops);
        assert_eq!(dct.electrodes, raw.electrodes);
        assert_eq!(dct.executed_ops, report.full_rate_samples);
        assert!(report.cost_contrast_violations().is_empty());
    }

    #[test]
    fn full_comparison_is_structurally_consistent() {
        let ds = dataset();
        let s = ComparisonSettings {
            dct_keep: vec![16],
            cs_measurements: vec![32],
            ..Default::default()
        };
        let report = run_comparison(
            &ds,
            &constant_model(-40.0),
            &s,
            &ClockPlan::default(),
            Execution::Parallel,
        )
        .unwrap();
        let labels: Vec<String> = report
            .rows
            .iter()
            .map(|r| format!("{} {}", r.scheme, r.config))
            .collect();
        assert_eq!(
            labels,
            [
                "raw x1",
                "adaptive eps0.05",
                "adaptive eps0.1",
                "adaptive match_x2",
                "adaptive match_x4",
                "uniform x2",
                "uniform x4",
                "dct N128_K16",
                "cs N128_M32_k8"
            ]
        );
        assert!(
            report.cost_contrast_violations().is_empty(),
            "{:?}",
            report.cost_contrast_violations()
        );
        // Every factor looks free, so no budget can pull the ratio below the cap.
        assert_eq!(report.row(Scheme::Adaptive, "match_x2").unwrap().cr_acq, 10.0);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().count(), report.rows.len() + 1);
        assert!(csv.starts_with("scheme,config,cr_acq,cr_tx,fnr,fpr,sde,executed_ops\n"));

        let seq = run_comparison(
            &ds,
            &constant_model(-40.0),
            &s,
            &ClockPlan::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(seq, report);
    }
}
