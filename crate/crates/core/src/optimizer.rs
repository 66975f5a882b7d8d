//! Server-side configuration search: for each electrode, the lowest realized
//! sample rate whose predicted detection error fits the budget, and the
//! threshold to run it with.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{AcquisitionError, ClockPlan, ElectrodeSchedule, FactorSet};
use crate::exec::{self, Execution};
use crate::predictor::{
    predict, ErrorEstimate, MlpModel, NoiseContext, PredictorError, PredictorInput, TemplateResponse,
};
use crate::signal::{estimate_noise_sigma, NeuralTrace, SignalError, SpikeTemplate};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid optimizer settings: {0}")]
    Settings(String),
    #[error("{templates} templates for {electrodes} electrodes")]
    CountMismatch { templates: usize, electrodes: usize },
    #[error("duplicate electrode id {0} in config vector")]
    DuplicateElectrode(u32),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("config document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Predicted total detection error.
pub fn total_error(est: &ErrorEstimate) -> f64 {
    est.fnr + est.fpr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    /// Budget on predicted `fnr + fpr`.
    pub epsilon: f64,
    pub factor_set: FactorSet,
    /// Candidate thresholds in wideband noise sigmas, descending (least
    /// strict first), all negative.
    pub threshold_grid_sigmas: Vec<f64>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            factor_set: FactorSet::default(),
            threshold_grid_sigmas: vec![-3.0, -3.5, -4.0, -4.5, -5.0],
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(OptimizerError::Settings(format!(
                "epsilon {} outside (0, 1)",
                self.epsilon
            )));
        }
        let g = &self.threshold_grid_sigmas;
        if g.is_empty() {
            return Err(OptimizerError::Settings("threshold grid is empty".into()));
        }
        if g.iter().any(|&t| !(t < 0.0) || !t.is_finite()) {
            return Err(OptimizerError::Settings(format!("thresholds must be negative: {g:?}")));
        }
        if g.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(OptimizerError::Settings(format!(
                "thresholds must be strictly descending: {g:?}"
            )));
        }
        Ok(())
    }
}

/// What the optimizer needs to know about one electrode.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeProfile {
    pub template: SpikeTemplate,
    pub noise: NoiseContext,
}

impl ElectrodeProfile {
    /// Profiles for every channel of a full-rate trace: `templates[i]` belongs
    /// to channel `i`, and the wideband noise sigma is the MAD estimate of the
    /// raw channel.
    pub fn from_trace(trace: &NeuralTrace, templates: &[SpikeTemplate]) -> Result<Vec<Self>, OptimizerError> {
        if templates.len() != trace.n_channels() {
            return Err(OptimizerError::CountMismatch {
                templates: templates.len(),
                electrodes: trace.n_channels(),
            });
        }
        trace
            .channels()
            .iter()
            .zip(templates)
            .map(|(ch, t)| {
                let raw = trace.signal_uv(ch.id)?;
                let sigma = estimate_noise_sigma(&raw)?;
                if !(sigma > 0.0) {
                    return Err(SignalError::NonPositiveSigma(sigma).into());
                }
                Ok(Self {
                    template: SpikeTemplate {
                        electrode_id: ch.id,
                        ..t.clone()
                    },
                    noise: NoiseContext {
                        white_sigma_uv: sigma,
                        base_rate_hz: ch.sample_rate_hz,
                    },
                })
            })
            .collect()
    }
}

/// One evaluated grid point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub factor: u32,
    pub threshold_sigmas: f64,
    pub predicted: ErrorEstimate,
}

/// Optimizer decision for one electrode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeConfig {
    pub schedule: ElectrodeSchedule,
    /// No grid point met the budget; the electrode runs at full rate.
    pub flagged: bool,
    /// Prediction at the chosen point; absent for imported configs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<ErrorEstimate>,
}

/// Predicted errors over the whole factor x threshold grid, factor-major.
pub fn evaluate_grid(
    profile: &ElectrodeProfile,
    model: &MlpModel,
    settings: &OptimizerSettings,
) -> Result<Vec<Candidate>, OptimizerError> {
    let mut out = Vec::with_capacity(settings.factor_set.factors().len() * settings.threshold_grid_sigmas.len());
    for &factor in settings.factor_set.factors() {
        let response = TemplateResponse::compute(&profile.template, factor)?;
        for &k in &settings.threshold_grid_sigmas {
            let input = PredictorInput::with_response(&profile.template, factor, k, &profile.noise, &response)?;
            out.push(Candidate {
                factor,
                threshold_sigmas: k,
                predicted: predict(model, &input)?,
            });
        }
    }
    Ok(out)
}

/// Budget-constrained choice over evaluated candidates: the largest feasible
/// factor, then the lowest predicted error, then the strictest threshold.
/// Returns `(candidate, flagged)`; when nothing is feasible the pick is the
/// lowest-error threshold at factor 1.
pub fn select(candidates: &[Candidate], epsilon: f64) -> Option<(Candidate, bool)> {
    // Lower error first, then more negative threshold.
    let better = |a: &Candidate, b: &Candidate| {
        total_error(&a.predicted)
            .total_cmp(&total_error(&b.predicted))
            .then(a.threshold_sigmas.total_cmp(&b.threshold_sigmas))
    };
    let feasible = candidates.iter().filter(|c| total_error(&c.predicted) <= epsilon);
    if let Some(top) = feasible.clone().map(|c| c.factor).max() {
        let pick = feasible.filter(|c| c.factor == top).min_by(|a, b| better(a, b))?;
        return Some((*pick, false));
    }
    let pick = candidates
        .iter()
        .filter(|c| c.factor == 1)
        .min_by(|a, b| better(a, b))?;
    Some((*pick, true))
}

pub fn optimize_electrode(
    profile: &ElectrodeProfile,
    model: &MlpModel,
    settings: &OptimizerSettings,
    plan: &ClockPlan,
) -> Result<ElectrodeConfig, OptimizerError> {
    settings.validate()?;
    plan.validate()?;
    let candidates = evaluate_grid(profile, model, settings)?;
    let (pick, flagged) =
        select(&candidates, settings.epsilon).expect("factor set contains 1 and the grid is non-empty");
    let schedule = ElectrodeSchedule::for_factor(
        profile.template.electrode_id,
        pick.factor,
        profile.noise.threshold_uv(pick.threshold_sigmas),
        plan,
        &settings.factor_set,
    )?;
    if flagged {
        log::warn!(
            "electrode {}: no configuration within budget {}, falling back to full rate",
            schedule.electrode_id,
            settings.epsilon
        );
    }
    Ok(ElectrodeConfig {
        schedule,
        flagged,
        predicted: Some(pick.predicted),
    })
}

/// Independent per-electrode optimization; output follows input order.
pub fn optimize_array(
    profiles: &[ElectrodeProfile],
    model: &MlpModel,
    settings: &OptimizerSettings,
    plan: &ClockPlan,
    epoch: u16,
    exec: Execution,
) -> Result<ConfigVector, OptimizerError> {
    ArrayGrid::evaluate(profiles, model, settings, exec)?.select(settings.epsilon, plan, epoch)
}

/// Predicted grids for a whole array, so that different budgets or
/// allocations can be derived without re-running the predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayGrid {
    settings: OptimizerSettings,
    electrodes: Vec<(u32, NoiseContext, Vec<Candidate>)>,
}

fn warn_flagged(cv: &ConfigVector, epsilon: f64) {
    for e in cv.electrodes.iter().filter(|e| e.flagged) {
        log::warn!(
            "electrode {}: no configuration within budget {epsilon}, falling back to full rate",
            e.schedule.electrode_id
        );
    }
}

impl ArrayGrid {
    pub fn evaluate(
        profiles: &[ElectrodeProfile],
        model: &MlpModel,
        settings: &OptimizerSettings,
        exec: Execution,
    ) -> Result<Self, OptimizerError> {
        settings.validate()?;
        let electrodes = exec::map(exec, profiles, |p| {
            evaluate_grid(p, model, settings).map(|c| (p.template.electrode_id, p.noise, c))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            settings: settings.clone(),
            electrodes,
        })
    }

    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }

    pub fn candidates(&self, index: usize) -> &[Candidate] {
        &self.electrodes[index].2
    }

    fn build(
        &self,
        plan: &ClockPlan,
        epoch: u16,
        pick: impl Fn(&[Candidate]) -> (Candidate, bool),
    ) -> Result<ConfigVector, OptimizerError> {
        plan.validate()?;
        let electrodes = self
            .electrodes
            .iter()
            .map(|(id, noise, cands)| {
                let (c, flagged) = pick(cands);
                let schedule = ElectrodeSchedule::for_factor(
                    *id,
                    c.factor,
                    noise.threshold_uv(c.threshold_sigmas),
                    plan,
                    &self.settings.factor_set,
                )?;
                Ok(ElectrodeConfig {
                    schedule,
                    flagged,
                    predicted: Some(c.predicted),
                })
            })
            .collect::<Result<Vec<_>, OptimizerError>>()?;
        Ok(ConfigVector { epoch, electrodes })
    }

    /// Budgeted selection, as [`optimize_electrode`] per electrode.
    pub fn select(&self, epsilon: f64, plan: &ClockPlan, epoch: u16) -> Result<ConfigVector, OptimizerError> {
        OptimizerSettings {
            epsilon,
            ..self.settings.clone()
        }
        .validate()?;
        let cv = self.select_quiet(epsilon, plan, epoch)?;
        warn_flagged(&cv, epsilon);
        Ok(cv)
    }

    fn select_quiet(&self, epsilon: f64, plan: &ClockPlan, epoch: u16) -> Result<ConfigVector, OptimizerError> {
        self.build(plan, epoch, |c| {
            select(c, epsilon).expect("factor 1 is always evaluated")
        })
    }

    /// Every electrode at `factor` with its lowest-error threshold; flagged
    /// where that still exceeds the budget.
    pub fn uniform(&self, factor: u32, plan: &ClockPlan, epoch: u16) -> Result<ConfigVector, OptimizerError> {
        if !self.settings.factor_set.contains(factor) {
            return Err(AcquisitionError::UnsupportedFactor(factor).into());
        }
        let eps = self.settings.epsilon;
        self.build(plan, epoch, |cands| {
            let at: Vec<Candidate> = cands.iter().filter(|c| c.factor == factor).copied().collect();
            let (best, _) = select(&at, f64::INFINITY).expect("factor was evaluated");
            (best, total_error(&best.predicted) > eps)
        })
    }

    /// Budgeted selection whose acquisition compression ratio is as close as
    /// possible to `target_cr`, found by bisection on the budget (the ratio
    /// is non-decreasing in it). Returns the config and the budget used.
    pub fn match_compression(
        &self,
        target_cr: f64,
        plan: &ClockPlan,
        epoch: u16,
    ) -> Result<(ConfigVector, f64), OptimizerError> {
        let (mut lo, mut hi) = (1e-6, 1.0 - 1e-6);
        let mut best: Option<(f64, ConfigVector, f64)> = None;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let cv = self.select_quiet(mid, plan, epoch)?;
            let cr = cv.compression_ratio();
            let gap = (cr - target_cr).abs();
            if best.as_ref().is_none_or(|b| gap < b.0) {
                best = Some((gap, cv, mid));
            }
            if cr < target_cr {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-9 {
                break;
            }
        }
        let (_, cv, eps) = best.expect("at least one bisection step");
        Ok((cv, eps))
    }
}

/// Per-electrode configuration pushed to the headstage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigVector {
    /// Recalibration counter.
    pub epoch: u16,
    pub electrodes: Vec<ElectrodeConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    epoch: u16,
    electrodes: Vec<ConfigDocEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDocEntry {
    electrode_id: u32,
    target_rate_hz: f64,
    factor: u32,
    threshold_uv: f64,
    flagged: bool,
}

impl ConfigVector {
    pub fn schedules(&self) -> Vec<ElectrodeSchedule> {
        self.electrodes.iter().map(|e| e.schedule).collect()
    }

    pub fn n_flagged(&self) -> usize {
        self.electrodes.iter().filter(|e| e.flagged).count()
    }

    /// Full-rate samples over executed samples for equal-length channels.
    pub fn compression_ratio(&self) -> f64 {
        let acquired: f64 = self.electrodes.iter().map(|e| 1.0 / f64::from(e.schedule.factor)).sum();
        if acquired == 0.0 {
            return 1.0;
        }
        self.electrodes.len() as f64 / acquired
    }

    pub fn mean_factor(&self) -> f64 {
        if self.electrodes.is_empty() {
            return 0.0;
        }
        self.electrodes
            .iter()
            .map(|e| f64::from(e.schedule.factor))
            .sum::<f64>()
            / self.electrodes.len() as f64
    }

    pub fn validate(&self, plan: &ClockPlan, factors: &FactorSet) -> Result<(), OptimizerError> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.electrodes {
            if !seen.insert(e.schedule.electrode_id) {
                return Err(OptimizerError::DuplicateElectrode(e.schedule.electrode_id));
            }
            e.schedule.validate(plan, factors)?;
        }
        Ok(())
    }

    /// Pretty JSON with one object per electrode.
    pub fn to_json(&self) -> String {
        let doc = ConfigDoc {
            epoch: self.epoch,
            electrodes: self
                .electrodes
                .iter()
                .map(|e| ConfigDocEntry {
                    electrode_id: e.schedule.electrode_id,
                    target_rate_hz: e.schedule.target_rate_hz,
                    factor: e.schedule.factor,
                    threshold_uv: e.schedule.threshold_uv,
                    flagged: e.flagged,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("config document serializes")
    }

    /// Parses [`ConfigVector::to_json`] output; realized rates are recomputed
    /// from `plan` and every schedule is validated.
    pub fn from_json(text: &str, plan: &ClockPlan, factors: &FactorSet) -> Result<Self, OptimizerError> {
        let doc: ConfigDoc = serde_json::from_str(text)?;
        let electrodes = doc
            .electrodes
            .into_iter()
            .map(|d| {
                let schedule = ElectrodeSchedule {
                    electrode_id: d.electrode_id,
                    target_rate_hz: d.target_rate_hz,
                    factor: d.factor,
                    realized_rate_hz: plan.r_max_hz() / f64::from(d.factor.max(1)),
                    threshold_uv: d.threshold_uv,
                };
                ElectrodeConfig {
                    schedule,
                    flagged: d.flagged,
                    predicted: None,
                }
            })
            .collect();
        let cv = Self {
            epoch: doc.epoch,
            electrodes,
        };
        cv.validate(plan, factors)?;
        Ok(cv)
    }

    pub fn save(&self, path: &Path) -> Result<(), OptimizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path, plan: &ClockPlan, factors: &FactorSet) -> Result<Self, OptimizerError> {
        Self::from_json(&std::fs::read_to_string(path)?, plan, factors)
    }
}
