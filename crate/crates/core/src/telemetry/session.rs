use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codec::{
    decode_config, encode_config, encode_event, from_tenths, to_tenths, to_tenths_saturating, CodecError, ConfigEntry,
    ConfigPacket, Deframer, Packet, SpikeEventPacket, EVENT_PACKET_LEN, PROTOCOL_VERSION,
};
use super::transport::{open_link, Transport};
use super::TelemetryError;
use crate::acquisition::{acquire, AcquisitionCost, ClockPlan, ElectrodeSchedule, FactorSet};
use crate::evaluation::{detect_channels, match_events, DetectionReport, ElectrodeGroundTruth, DEFAULT_WINDOW_S};
use crate::exec::Execution;
use crate::optimizer::{optimize_array, ConfigVector, ElectrodeProfile, OptimizerSettings};
use crate::predictor::MlpModel;
use crate::signal::DEFAULT_DEAD_TIME_S;
use crate::synth::SyntheticDataset;

/// Injected link faults.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Fault {
    /// The config packet of `epoch` never reaches the headstage.
    DownlinkDrop { epoch: u16 },
    /// One byte of the config packet of `epoch` is flipped in flight.
    DownlinkCorrupt { epoch: u16 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSettings {
    pub optimizer: OptimizerSettings,
    /// Seconds of recording to stream; `None` streams the whole dataset.
    pub duration_s: Option<f64>,
    /// Seconds between recalibrations; `None` calibrates once.
    pub recalibration_interval_s: Option<f64>,
    pub dead_time_s: f64,
    pub match_window_s: f64,
    pub faults: Vec<Fault>,
    pub transport: Transport,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            optimizer: OptimizerSettings::default(),
            duration_s: None,
            recalibration_interval_s: None,
            dead_time_s: DEFAULT_DEAD_TIME_S,
            match_window_s: DEFAULT_WINDOW_S,
            faults: Vec::new(),
            transport: Transport::InProcess,
        }
    }
}

/// Threshold the headstage runs with before any config arrives.
pub const BOOT_THRESHOLD_UV: f64 = -25.0;

/// One line of the session log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum SessionRecord {
    /// Server side: a configuration was computed and sent.
    ConfigSent {
        epoch: u16,
        bytes: usize,
        n_flagged: usize,
        mean_factor: f64,
    },
    /// Headstage side: outcome of the downlink for `epoch`.
    ConfigApplied {
        epoch: u16,
        delivered: bool,
        /// Epoch of the configuration actually in force (0 = boot defaults).
        active_epoch: u16,
        stale: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    /// Headstage side: one streamed segment.
    Segment {
        active_epoch: u16,
        start_s: f64,
        end_s: f64,
        events: usize,
        executed: u64,
        skipped: u64,
    },
    Event {
        electrode_id: u8,
        timestamp: u32,
        peak_tenths_uv: i16,
    },
    UplinkError {
        error: String,
    },
    Report {
        electrode_id: u32,
        factor: u32,
        threshold_uv: f64,
        flagged: bool,
        #[serde(flatten)]
        report: DetectionReport,
    },
    Summary {
        duration_s: f64,
        epochs: u16,
        stale_epochs: Vec<u16>,
        uplink_bits: u64,
        raw_bits: u64,
        executed_samples: u64,
        full_rate_samples: u64,
    },
}

/// Final outcome for one electrode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeOutcome {
    pub electrode_id: u32,
    pub factor: u32,
    pub threshold_uv: f64,
    pub flagged: bool,
    pub report: DetectionReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionLog {
    pub records: Vec<SessionRecord>,
    pub outcomes: Vec<ElectrodeOutcome>,
    pub cost: AcquisitionCost,
    /// Server-side config vectors, by epoch.
    pub configs: Vec<ConfigVector>,
    pub stale_epochs: Vec<u16>,
    pub uplink_bits: u64,
    pub raw_bits: u64,
}

impl SessionLog {
    pub fn n_events(&self) -> usize {
        self.records
            .iter()
            .filter(|r| matches!(r, SessionRecord::Event { .. }))
            .count()
    }

    pub fn config_epochs(&self) -> Vec<u16> {
        self.records
            .iter()
            .filter_map(|r| match r {
                SessionRecord::ConfigSent { epoch, .. } => Some(*epoch),
                _ => None,
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()
    }

    pub fn read_jsonl(text: &str) -> Result<Vec<SessionRecord>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}

/// Headstage state: only ever updated from decoded config packets.
#[derive(Clone, Debug)]
struct Headstage {
    plan: ClockPlan,
    factors: FactorSet,
    active_epoch: u16,
    schedules: Vec<ElectrodeSchedule>,
}

impl Headstage {
    fn boot(ids: &[u32], plan: ClockPlan, factors: FactorSet) -> Result<Self, TelemetryError> {
        let schedules = ids
            .iter()
            .map(|&id| ElectrodeSchedule::for_factor(id, 1, BOOT_THRESHOLD_UV, &plan, &factors))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            plan,
            factors,
            active_epoch: 0,
            schedules,
        })
    }

    /// Applies a downlink frame; on any problem the current config stays.
    fn receive(&mut self, bytes: Option<&[u8]>) -> Result<(), String> {
        let bytes = bytes.ok_or_else(|| "downlink dropped".to_string())?;
        let (packet, _) = decode_config(bytes).map_err(|e| e.to_string())?;
        if packet.entries.len() != self.schedules.len() {
            return Err(format!(
                "{} entries for {} electrodes",
                packet.entries.len(),
                self.schedules.len()
            ));
        }
        let mut next = self.schedules.clone();
        for (slot, e) in next.iter_mut().zip(&packet.entries) {
            if u32::from(e.electrode_id) != slot.electrode_id {
                return Err(format!(
                    "entry for electrode {} in slot {}",
                    e.electrode_id, slot.electrode_id
                ));
            }
            *slot = ElectrodeSchedule::for_factor(
                slot.electrode_id,
                u32::from(e.factor),
                from_tenths(e.threshold_tenths_uv),
                &self.plan,
                &self.factors,
            )
            .map_err(|err| err.to_string())?;
            if !(slot.threshold_uv < 0.0) {
                return Err(format!("non-negative threshold for electrode {}", slot.electrode_id));
            }
        }
        self.schedules = next;
        self.active_epoch = packet.epoch;
        Ok(())
    }
}

fn config_packet(cv: &ConfigVector) -> Result<ConfigPacket, TelemetryError> {
    let entries = cv
        .electrodes
        .iter()
        .map(|e| {
            let s = &e.schedule;
            Ok(ConfigEntry {
                electrode_id: u8::try_from(s.electrode_id)
                    .map_err(|_| CodecError::FieldRange(format!("electrode id {}", s.electrode_id)))?,
                factor: u8::try_from(s.factor).map_err(|_| CodecError::FieldRange(format!("factor {}", s.factor)))?,
                threshold_tenths_uv: to_tenths(s.threshold_uv)?,
            })
        })
        .collect::<Result<Vec<_>, CodecError>>()?;
    Ok(ConfigPacket {
        version: PROTOCOL_VERSION,
        epoch: cv.epoch,
        entries,
    })
}

/// Closed-loop session: per epoch the server optimizes and sends a config
/// over the downlink; the headstage applies whatever decodes, acquires,
/// detects and streams event packets on the uplink, which a server thread
/// deframes. Ends with per-electrode detection reports.
pub fn run_session(
    dataset: &SyntheticDataset,
    model: &MlpModel,
    settings: &SessionSettings,
    plan: &ClockPlan,
    exec: Execution,
) -> Result<SessionLog, TelemetryError> {
    settings.optimizer.validate()?;
    let total_s = dataset.trace.duration_s();
    let duration = settings.duration_s.unwrap_or(total_s).clamp(0.0, total_s);
    let interval = match settings.recalibration_interval_s {
        Some(i) if !(i > 0.0) => return Err(TelemetryError::Settings(format!("recalibration interval {i}"))),
        Some(i) => i,
        None => duration.max(f64::MIN_POSITIVE),
    };
    let n_epochs = ((duration / interval).ceil() as usize).max(1);
    let n_epochs = u16::try_from(n_epochs).map_err(|_| TelemetryError::Settings(format!("{n_epochs} epochs")))?;
    let ids = dataset.electrode_ids();
    if ids.iter().any(|&id| id > u32::from(u8::MAX)) {
        return Err(TelemetryError::Settings("electrode ids must fit in a byte".into()));
    }
    let f_clk = plan.f_clk_hz;
    if duration * f_clk > f64::from(u32::MAX) {
        return Err(TelemetryError::Settings(format!(
            "{duration} s overflows 32-bit timestamps"
        )));
    }

    let mut headstage = Headstage::boot(&ids, *plan, settings.optimizer.factor_set.clone())?;
    let mut records = Vec::new();
    let mut configs = Vec::new();
    let mut stale_epochs = Vec::new();
    let mut cost: Option<AcquisitionCost> = None;
    let (mut uplink_tx, mut uplink_rx) = open_link(settings.transport)?;

    let (uplink_records, events) = std::thread::scope(|s| -> Result<_, TelemetryError> {
        let server = s.spawn(
            move || -> std::io::Result<(Vec<SessionRecord>, Vec<SpikeEventPacket>)> {
                let mut df = Deframer::new();
                let mut out = Vec::new();
                let mut events = Vec::new();
                let mut buf = [0u8; 4096];
                let mut handle = |r: Result<Packet, CodecError>, out: &mut Vec<SessionRecord>| match r {
                    Ok(Packet::Event(e)) => {
                        out.push(SessionRecord::Event {
                            electrode_id: e.electrode_id,
                            timestamp: e.timestamp,
                            peak_tenths_uv: e.peak_tenths_uv,
                        });
                        events.push(e);
                    }
                    Ok(Packet::Config(_)) => out.push(SessionRecord::UplinkError {
                        error: "config packet on uplink".into(),
                    }),
                    Err(e) => out.push(SessionRecord::UplinkError { error: e.to_string() }),
                };
                loop {
                    let n = uplink_rx.read(&mut buf)?;
                    if n == 0 {
                        break;
                    }
                    df.push(&buf[..n]);
                    while let Some(r) = df.next_packet() {
                        handle(r, &mut out);
                    }
                }
                for r in df.finish() {
                    handle(r, &mut out);
                }
                Ok((out, events))
            },
        );

        for epoch in 1..=n_epochs {
            let t0 = f64::from(epoch - 1) * interval;
            let t1 = (f64::from(epoch) * interval).min(duration);
            // Server: calibrate on this epoch's data (the whole recording when
            // the segment is empty).
            let calib = if t1 > t0 {
                dataset.trace.slice_time(t0, t1)
            } else {
                dataset.trace.clone()
            };
            let profiles = ElectrodeProfile::from_trace(&calib, &dataset.templates)?;
            let cv = optimize_array(&profiles, model, &settings.optimizer, plan, epoch, exec)?;
            let bytes = encode_config(&config_packet(&cv)?)?;
            records.push(SessionRecord::ConfigSent {
                epoch,
                bytes: bytes.len(),
                n_flagged: cv.n_flagged(),
                mean_factor: cv.mean_factor(),
            });
            configs.push(cv);

            // Downlink, with faults.
            let mut in_flight = Some(bytes);
            for f in &settings.faults {
                match *f {
                    Fault::DownlinkDrop { epoch: e } if e == epoch => in_flight = None,
                    Fault::DownlinkCorrupt { epoch: e } if e == epoch => {
                        if let Some(b) = in_flight.as_mut() {
                            let mid = b.len() / 2;
                            b[mid] ^= 0x5a;
                        }
                    }
                    _ => {}
                }
            }
            let outcome = headstage.receive(in_flight.as_deref());
            let stale = outcome.is_err();
            if stale {
                log::warn!(
                    "epoch {epoch}: keeping configuration of epoch {}",
                    headstage.active_epoch
                );
                stale_epochs.push(epoch);
            }
            records.push(SessionRecord::ConfigApplied {
                epoch,
                delivered: in_flight.is_some(),
                active_epoch: headstage.active_epoch,
                stale,
                error: outcome.err(),
            });

            // Headstage: stream this segment.
            let segment = dataset.trace.slice_time(t0, t1);
            let (acquired, seg_cost) = acquire(&segment, &headstage.schedules, plan, exec)?;
            let thresholds: Vec<f64> = headstage.schedules.iter().map(|s| s.threshold_uv).collect();
            let detected = detect_channels(&acquired, &thresholds, settings.dead_time_s, exec)?;
            let mut packets: Vec<SpikeEventPacket> = detected
                .iter()
                .flatten()
                .map(|e| SpikeEventPacket {
                    version: PROTOCOL_VERSION,
                    electrode_id: e.electrode_id as u8,
                    timestamp: ((t0 + e.time_s) * f_clk).round() as u32,
                    peak_tenths_uv: to_tenths_saturating(e.peak_amplitude),
                })
                .collect();
            packets.sort_by_key(|p| (p.timestamp, p.electrode_id));
            for p in &packets {
                if let Err(e) = uplink_tx.write_all(&encode_event(p)) {
                    records.push(SessionRecord::UplinkError { error: e.to_string() });
                    break;
                }
            }
            records.push(SessionRecord::Segment {
                active_epoch: headstage.active_epoch,
                start_s: t0,
                end_s: t1,
                events: packets.len(),
                executed: seg_cost.total_executed(),
                skipped: seg_cost.total_skipped(),
            });
            match cost.as_mut() {
                Some(c) => c.merge(&seg_cost),
                None => cost = Some(seg_cost),
            }
        }
        uplink_tx.flush()?;
        drop(uplink_tx);
        let (rec, ev) = server.join().expect("uplink consumer panicked")?;
        Ok((rec, ev))
    })?;
    records.extend(uplink_records);

    // Server: score the received events.
    let mut by_electrode: BTreeMap<u32, Vec<crate::signal::SpikeEvent>> = BTreeMap::new();
    for e in &events {
        by_electrode
            .entry(u32::from(e.electrode_id))
            .or_default()
            .push(crate::signal::SpikeEvent {
                electrode_id: u32::from(e.electrode_id),
                time_s: f64::from(e.timestamp) / f_clk,
                peak_amplitude: from_tenths(e.peak_tenths_uv),
            });
    }
    // Feasibility flags of the configuration actually in force; boot
    // defaults were never optimized and count as flagged.
    let in_force = usize::from(headstage.active_epoch).checked_sub(1).map(|i| &configs[i]);
    let outcomes: Vec<ElectrodeOutcome> = ids
        .iter()
        .zip(&headstage.schedules)
        .map(|(&id, sched)| {
            let truth = dataset.ground_truth(id);
            let truth = ElectrodeGroundTruth {
                electrode_id: id,
                event_times_s: truth.event_times_s.into_iter().filter(|&t| t < duration).collect(),
            };
            let detected = by_electrode.remove(&id).unwrap_or_default();
            let flagged = in_force.is_none_or(|cv| {
                cv.electrodes
                    .iter()
                    .find(|e| e.schedule.electrode_id == id)
                    .is_some_and(|e| e.flagged)
            });
            ElectrodeOutcome {
                electrode_id: id,
                factor: sched.factor,
                threshold_uv: sched.threshold_uv,
                flagged,
                report: match_events(&truth, &detected, settings.match_window_s),
            }
        })
        .collect();
    for o in &outcomes {
        records.push(SessionRecord::Report {
            electrode_id: o.electrode_id,
            factor: o.factor,
            threshold_uv: o.threshold_uv,
            flagged: o.flagged,
            report: o.report,
        });
    }
    let cost = cost.expect("at least one segment");
    let uplink_bits = (events.len() * EVENT_PACKET_LEN * 8) as u64;
    let full_rate = (duration * plan.r_max_hz()).round() as u64 * ids.len() as u64;
    let raw_bits = full_rate * 16;
    records.push(SessionRecord::Summary {
        duration_s: duration,
        epochs: n_epochs,
        stale_epochs: stale_epochs.clone(),
        uplink_bits,
        raw_bits,
        executed_samples: cost.total_executed(),
        full_rate_samples: cost.full_rate_count(),
    });
    Ok(SessionLog {
        records,
        outcomes,
        cost,
        configs,
        stale_epochs,
        uplink_bits,
        raw_bits,
    })
}
