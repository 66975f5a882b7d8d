//! Headstage-side acquisition scheduler.
//!
//! The ADC interface runs rounds of `n_total` master-clock cycles, `n_sampling`
//! of which issue sampling commands, so the full per-electrode rate is
//! `r_max = n_sampling * f_clk / n_total`. Electrode `i` gets an integer
//! downsampling factor `x_i` and is sampled only in rounds where
//! `round % x_i == 0`, giving a realized rate of `r_max / x_i`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::signal::{resample_trace, Channel, NeuralTrace, SignalError};

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("invalid clock plan: {0}")]
    InvalidPlan(String),
    #[error("invalid factor set: {0}")]
    InvalidFactorSet(String),
    #[error("target rate {target_hz} Hz exceeds r_max {r_max_hz} Hz")]
    TargetRateExceedsMax { target_hz: f64, r_max_hz: f64 },
    #[error("target rate must be positive, got {0}")]
    NonPositiveTarget(f64),
    #[error("factor {0} is not in the supported set")]
    UnsupportedFactor(u32),
    #[error("schedule/channel mismatch: {0}")]
    ScheduleMismatch(String),
    #[error("channel {channel} runs at {rate_hz} Hz but r_max is {r_max_hz} Hz")]
    RateMismatch { channel: u32, rate_hz: f64, r_max_hz: f64 },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Master clock and command schedule of the ADC interface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockPlan {
    pub f_clk_hz: f64,
    pub n_total: u32,
    pub n_sampling: u32,
}

impl Default for ClockPlan {
    /// 24 MHz clock, 800-cycle rounds, one command per electrode per round:
    /// 30 kHz per electrode.
    fn default() -> Self {
        Self {
            f_clk_hz: 24_000_000.0,
            n_total: 800,
            n_sampling: 1,
        }
    }
}

impl ClockPlan {
    pub fn new(f_clk_hz: f64, n_total: u32, n_sampling: u32) -> Result<Self, AcquisitionError> {
        let plan = Self {
            f_clk_hz,
            n_total,
            n_sampling,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), AcquisitionError> {
        if !(self.f_clk_hz > 0.0 && self.f_clk_hz.is_finite()) {
            return Err(AcquisitionError::InvalidPlan(format!(
                "clock must be positive, got {}",
                self.f_clk_hz
            )));
        }
        if self.n_total == 0 || self.n_sampling == 0 {
            return Err(AcquisitionError::InvalidPlan("cycle counts must be positive".into()));
        }
        if self.n_sampling > self.n_total {
            return Err(AcquisitionError::InvalidPlan(format!(
                "n_sampling {} exceeds n_total {}",
                self.n_sampling, self.n_total
            )));
        }
        Ok(())
    }

    pub fn r_max_hz(&self) -> f64 {
        compute_r_max(self)
    }

    /// Duration of one scheduling round in seconds.
    pub fn round_period_s(&self) -> f64 {
        f64::from(self.n_total) / self.f_clk_hz
    }
}

pub fn compute_r_max(plan: &ClockPlan) -> f64 {
    f64::from(plan.n_sampling) * plan.f_clk_hz / f64::from(plan.n_total)
}

/// Supported integer downsampling factors: ascending, distinct, containing 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct FactorSet(Vec<u32>);

impl FactorSet {
    pub fn new(mut factors: Vec<u32>) -> Result<Self, AcquisitionError> {
        if factors.contains(&0) {
            return Err(AcquisitionError::InvalidFactorSet("factors must be positive".into()));
        }
        factors.sort_unstable();
        factors.dedup();
        if factors.first() != Some(&1) {
            return Err(AcquisitionError::InvalidFactorSet("factor 1 is required".into()));
        }
        Ok(Self(factors))
    }

    pub fn factors(&self) -> &[u32] {
        &self.0
    }

    pub fn contains(&self, factor: u32) -> bool {
        self.0.binary_search(&factor).is_ok()
    }

    pub fn max(&self) -> u32 {
        *self.0.last().expect("factor set is non-empty")
    }
}

impl Default for FactorSet {
    fn default() -> Self {
        Self(vec![1, 2, 3, 4, 5, 6, 8, 10])
    }
}

impl TryFrom<Vec<u32>> for FactorSet {
    type Error = AcquisitionError;
    fn try_from(v: Vec<u32>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<FactorSet> for Vec<u32> {
    fn from(f: FactorSet) -> Self {
        f.0
    }
}

/// Largest supported factor whose realized rate still meets `target_rate_hz`.
pub fn select_factor(target_rate_hz: f64, r_max_hz: f64, factors: &FactorSet) -> Result<u32, AcquisitionError> {
    if !(target_rate_hz > 0.0) {
        return Err(AcquisitionError::NonPositiveTarget(target_rate_hz));
    }
    factors
        .factors()
        .iter()
        .rev()
        .copied()
        .find(|&x| r_max_hz / f64::from(x) >= target_rate_hz)
        .ok_or(AcquisitionError::TargetRateExceedsMax {
            target_hz: target_rate_hz,
            r_max_hz,
        })
}

/// Whether an electrode with `factor` is sampled in round `round_index`.
#[inline]
pub fn round_gate(round_index: u64, factor: u32) -> bool {
    round_index.is_multiple_of(u64::from(factor))
}

/// Per-electrode acquisition setting as executed by the headstage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeSchedule {
    pub electrode_id: u32,
    pub target_rate_hz: f64,
    pub factor: u32,
    pub realized_rate_hz: f64,
    pub threshold_uv: f64,
}

impl ElectrodeSchedule {
    /// Resolves `target_rate_hz` to a hardware factor.
    pub fn for_target(
        electrode_id: u32,
        target_rate_hz: f64,
        threshold_uv: f64,
        plan: &ClockPlan,
        factors: &FactorSet,
    ) -> Result<Self, AcquisitionError> {
        let r_max = plan.r_max_hz();
        let factor = select_factor(target_rate_hz, r_max, factors)?;
        Ok(Self {
            electrode_id,
            target_rate_hz,
            factor,
            realized_rate_hz: r_max / f64::from(factor),
            threshold_uv,
        })
    }

    /// Schedule for a known factor; the target is taken to be the realized rate.
    pub fn for_factor(
        electrode_id: u32,
        factor: u32,
        threshold_uv: f64,
        plan: &ClockPlan,
        factors: &FactorSet,
    ) -> Result<Self, AcquisitionError> {
        if !factors.contains(factor) {
            return Err(AcquisitionError::UnsupportedFactor(factor));
        }
        let realized = plan.r_max_hz() / f64::from(factor);
        Ok(Self {
            electrode_id,
            target_rate_hz: realized,
            factor,
            realized_rate_hz: realized,
            threshold_uv,
        })
    }

    pub fn validate(&self, plan: &ClockPlan, factors: &FactorSet) -> Result<(), AcquisitionError> {
        if !factors.contains(self.factor) {
            return Err(AcquisitionError::UnsupportedFactor(self.factor));
        }
        let expected = plan.r_max_hz() / f64::from(self.factor);
        if (self.realized_rate_hz - expected).abs() > 1e-9 * expected {
            return Err(AcquisitionError::ScheduleMismatch(format!(
                "electrode {} realized rate {} != r_max/x = {}",
                self.electrode_id, self.realized_rate_hz, expected
            )));
        }
        if self.realized_rate_hz < self.target_rate_hz * (1.0 - 1e-12) {
            return Err(AcquisitionError::ScheduleMismatch(format!(
                "electrode {} realized rate {} undershoots target {}",
                self.electrode_id, self.realized_rate_hz, self.target_rate_hz
            )));
        }
        Ok(())
    }
}

/// Modulo-counter round scheduler: one counter per electrode, one shared
/// round index.
#[derive(Clone, Debug)]
pub struct RoundScheduler {
    factors: Vec<u32>,
    round: u64,
    executed: Vec<u64>,
    skipped: Vec<u64>,
}

impl RoundScheduler {
    pub fn new(factors: Vec<u32>) -> Self {
        let n = factors.len();
        Self {
            factors,
            round: 0,
            executed: vec![0; n],
            skipped: vec![0; n],
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Runs one round; `gate[i]` is set for electrodes sampled this round.
    pub fn advance(&mut self, gate: &mut [bool]) {
        for (i, &x) in self.factors.iter().enumerate() {
            let on = round_gate(self.round, x);
            gate[i] = on;
            if on {
                self.executed[i] += 1;
            } else {
                self.skipped[i] += 1;
            }
        }
        self.round += 1;
    }

    pub fn run(&mut self, rounds: u64) {
        let mut gate = vec![false; self.factors.len()];
        for _ in 0..rounds {
            self.advance(&mut gate);
        }
    }

    pub fn executed(&self) -> &[u64] {
        &self.executed
    }

    pub fn skipped(&self) -> &[u64] {
        &self.skipped
    }
}

/// Executed sampling commands for a factor over `rounds` rounds.
pub fn executed_commands(rounds: u64, factor: u32) -> u64 {
    rounds.div_ceil(u64::from(factor))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCost {
    pub channel_id: u32,
    pub factor: u32,
    pub executed: u64,
    pub skipped: u64,
}

/// Sampling-command counters for one acquisition run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquisitionCost {
    pub rounds: u64,
    pub channels: Vec<ChannelCost>,
}

impl AcquisitionCost {
    pub fn total_executed(&self) -> u64 {
        self.channels.iter().map(|c| c.executed).sum()
    }

    pub fn total_skipped(&self) -> u64 {
        self.channels.iter().map(|c| c.skipped).sum()
    }

    /// Samples a full-rate front-end would have converted.
    pub fn full_rate_count(&self) -> u64 {
        self.rounds * self.channels.len() as u64
    }

    /// Cost of converting every channel at full rate for `rounds` rounds.
    pub fn full_rate(channel_ids: &[u32], rounds: u64) -> Self {
        Self {
            rounds,
            channels: channel_ids
                .iter()
                .map(|&id| ChannelCost {
                    channel_id: id,
                    factor: 1,
                    executed: rounds,
                    skipped: 0,
                })
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &AcquisitionCost) {
        if self.channels.is_empty() {
            *self = other.clone();
            return;
        }
        self.rounds += other.rounds;
        for (a, b) in self.channels.iter_mut().zip(&other.channels) {
            a.executed += b.executed;
            a.skipped += b.skipped;
            a.factor = b.factor;
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "channel_id,factor,executed,skipped")?;
        for c in &self.channels {
            writeln!(w, "{},{},{},{}", c.channel_id, c.factor, c.executed, c.skipped)?;
        }
        Ok(())
    }
}

/// Re-digitizes a full-rate trace under per-electrode schedules.
///
/// Skipped rounds produce no samples at all; each output channel holds
/// exactly the commands its gate executed, taken from the band-limited
/// reconstruction of the input.
pub fn acquire(
    full_rate: &NeuralTrace,
    schedules: &[ElectrodeSchedule],
    plan: &ClockPlan,
    exec: Execution,
) -> Result<(NeuralTrace, AcquisitionCost), AcquisitionError> {
    let r_max = plan.r_max_hz();
    if schedules.len() != full_rate.n_channels() {
        return Err(AcquisitionError::ScheduleMismatch(format!(
            "{} schedules for {} channels",
            schedules.len(),
            full_rate.n_channels()
        )));
    }
    let mut rounds = 0u64;
    for (ch, s) in full_rate.channels().iter().zip(schedules) {
        if ch.id != s.electrode_id {
            return Err(AcquisitionError::ScheduleMismatch(format!(
                "channel {} paired with schedule for electrode {}",
                ch.id, s.electrode_id
            )));
        }
        if (ch.sample_rate_hz - r_max).abs() > 1e-9 * r_max {
            return Err(AcquisitionError::RateMismatch {
                channel: ch.id,
                rate_hz: ch.sample_rate_hz,
                r_max_hz: r_max,
            });
        }
        if s.factor == 0 {
            return Err(AcquisitionError::UnsupportedFactor(0));
        }
        rounds = rounds.max(ch.samples.len() as u64);
    }

    let mut scheduler = RoundScheduler::new(schedules.iter().map(|s| s.factor).collect());
    scheduler.run(rounds);

    let channels = exec::map(exec, schedules, |s| -> Result<Channel, AcquisitionError> {
        let one = resample_trace(full_rate, s.electrode_id, r_max / f64::from(s.factor))?;
        Ok(one.channels()[0].clone())
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let cost = AcquisitionCost {
        rounds,
        channels: schedules
            .iter()
            .enumerate()
            .map(|(i, s)| ChannelCost {
                channel_id: s.electrode_id,
                factor: s.factor,
                executed: scheduler.executed()[i],
                skipped: scheduler.skipped()[i],
            })
            .collect(),
    };
    for (ch, c) in channels.iter().zip(&cost.channels) {
        debug_assert_eq!(ch.samples.len() as u64, c.executed);
    }
    Ok((NeuralTrace::new(channels, full_rate.uv_per_count())?, cost))
}
