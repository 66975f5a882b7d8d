//! Downlink config and uplink spike-event wire formats, byte transports, and
//! the closed-loop calibrate-then-stream session driver.

mod codec;
mod session;
mod transport;

pub use codec::{
    config_packet_len, decode_config, decode_event, encode_config, encode_event, from_tenths, to_tenths,
    to_tenths_saturating, CodecError, ConfigEntry, ConfigPacket, Deframer, Packet, SpikeEventPacket, CONFIG_MAGIC,
    EVENT_MAGIC, EVENT_PACKET_LEN, PROTOCOL_VERSION,
};
pub use session::{
    run_session, ElectrodeOutcome, Fault, SessionLog, SessionRecord, SessionSettings, BOOT_THRESHOLD_UV,
};
pub use transport::{in_process_link, open_link, tcp_link, ChannelReader, ChannelWriter, Transport};

use thiserror::Error;

use crate::acquisition::AcquisitionError;
use crate::optimizer::OptimizerError;
use crate::signal::SignalError;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid session settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
}
