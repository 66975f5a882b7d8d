//! Little-endian, CRC-32-terminated packet layouts.
//!
//! ```text
//! ACFG | version u8 | epoch u16 | n u8 | n x (id u8, factor u8, threshold i16) | crc32
//! ASPK | version u8 | id u8 | timestamp u32 | peak i16 | crc32
//! ```
//! Thresholds and peaks are tenths of a microvolt.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_MAGIC: [u8; 4] = *b"ACFG";
pub const EVENT_MAGIC: [u8; 4] = *b"ASPK";
pub const PROTOCOL_VERSION: u8 = 1;
pub const CONFIG_HEADER_LEN: usize = 8;
pub const CONFIG_ENTRY_LEN: usize = 4;
pub const EVENT_PACKET_LEN: usize = 16;
const CRC_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("crc mismatch: packet says {stored:08x}, computed {computed:08x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("truncated packet: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("field out of range: {0}")]
    FieldRange(String),
}

/// One electrode's entry on the downlink.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub electrode_id: u8,
    pub factor: u8,
    pub threshold_tenths_uv: i16,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigPacket {
    pub version: u8,
    pub epoch: u16,
    pub entries: Vec<ConfigEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeEventPacket {
    pub version: u8,
    pub electrode_id: u8,
    /// Master-clock ticks since session start.
    pub timestamp: u32,
    pub peak_tenths_uv: i16,
}

/// Either packet type, as produced by the stream deframer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Packet {
    Config(ConfigPacket),
    Event(SpikeEventPacket),
}

/// Microvolts to the wire's tenths, rejecting values outside i16.
pub fn to_tenths(uv: f64) -> Result<i16, CodecError> {
    let t = (uv * 10.0).round();
    if !(t >= f64::from(i16::MIN) && t <= f64::from(i16::MAX)) {
        return Err(CodecError::FieldRange(format!("{uv} µV does not fit in i16 tenths")));
    }
    Ok(t as i16)
}

/// As [`to_tenths`] but saturating, for measured peaks.
pub fn to_tenths_saturating(uv: f64) -> i16 {
    (uv * 10.0).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
}

pub fn from_tenths(t: i16) -> f64 {
    f64::from(t) / 10.0
}

fn crc(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let c = crc(&out);
    out.extend_from_slice(&c.to_le_bytes());
    out
}

pub fn config_packet_len(n_electrodes: usize) -> usize {
    CONFIG_HEADER_LEN + CONFIG_ENTRY_LEN * n_electrodes + CRC_LEN
}

pub fn encode_config(p: &ConfigPacket) -> Result<Vec<u8>, CodecError> {
    let n = u8::try_from(p.entries.len())
        .map_err(|_| CodecError::FieldRange(format!("{} electrodes exceed 255", p.entries.len())))?;
    let mut out = Vec::with_capacity(config_packet_len(p.entries.len()));
    out.extend_from_slice(&CONFIG_MAGIC);
    out.push(p.version);
    out.extend_from_slice(&p.epoch.to_le_bytes());
    out.push(n);
    for e in &p.entries {
        out.push(e.electrode_id);
        out.push(e.factor);
        out.extend_from_slice(&e.threshold_tenths_uv.to_le_bytes());
    }
    Ok(seal(out))
}

/// Checks magic, length, CRC and version of the packet at the start of
/// `bytes`; returns its total length.
fn check_frame(bytes: &[u8], magic: [u8; 4], len_of: impl Fn(&[u8]) -> Option<usize>) -> Result<usize, CodecError> {
    if bytes.len() < 4 {
        return Err(CodecError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(CodecError::BadMagic(found));
    }
    let Some(len) = len_of(bytes) else {
        return Err(CodecError::Truncated {
            needed: CONFIG_HEADER_LEN,
            available: bytes.len(),
        });
    };
    if bytes.len() < len {
        return Err(CodecError::Truncated {
            needed: len,
            available: bytes.len(),
        });
    }
    let stored = u32::from_le_bytes(bytes[len - CRC_LEN..len].try_into().expect("4 bytes"));
    let computed = crc(&bytes[..len - CRC_LEN]);
    if stored != computed {
        return Err(CodecError::BadCrc { stored, computed });
    }
    if bytes[4] != PROTOCOL_VERSION {
        return Err(CodecError::UnsupportedVersion(bytes[4]));
    }
    Ok(len)
}

fn config_len(bytes: &[u8]) -> Option<usize> {
    (bytes.len() >= CONFIG_HEADER_LEN).then(|| config_packet_len(usize::from(bytes[7])))
}

/// Decodes the config packet at the start of `bytes`; returns it with the
/// number of bytes consumed. Trailing bytes are left alone.
pub fn decode_config(bytes: &[u8]) -> Result<(ConfigPacket, usize), CodecError> {
    let len = check_frame(bytes, CONFIG_MAGIC, config_len)?;
    let entries = bytes[CONFIG_HEADER_LEN..len - CRC_LEN]
        .chunks_exact(CONFIG_ENTRY_LEN)
        .map(|c| ConfigEntry {
            electrode_id: c[0],
            factor: c[1],
            threshold_tenths_uv: i16::from_le_bytes([c[2], c[3]]),
        })
        .collect();
    Ok((
        ConfigPacket {
            version: bytes[4],
            epoch: u16::from_le_bytes([bytes[5], bytes[6]]),
            entries,
        },
        len,
    ))
}

pub fn encode_event(p: &SpikeEventPacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVENT_PACKET_LEN);
    out.extend_from_slice(&EVENT_MAGIC);
    out.push(p.version);
    out.push(p.electrode_id);
    out.extend_from_slice(&p.timestamp.to_le_bytes());
    out.extend_from_slice(&p.peak_tenths_uv.to_le_bytes());
    seal(out)
}

pub fn decode_event(bytes: &[u8]) -> Result<(SpikeEventPacket, usize), CodecError> {
    let len = check_frame(bytes, EVENT_MAGIC, |_| Some(EVENT_PACKET_LEN))?;
    Ok((
        SpikeEventPacket {
            version: bytes[4],
            electrode_id: bytes[5],
            timestamp: u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")),
            peak_tenths_uv: i16::from_le_bytes([bytes[10], bytes[11]]),
        },
        len,
    ))
}

/// Incremental deframer for a byte stream carrying either packet type.
///
/// Bytes before a recognizable magic are skipped. A frame that fails its
/// CRC is reported and scanning resumes one byte later. A frame cut short by
/// the start of another packet is reported as truncated and the stream
/// resynchronizes on that next magic.
#[derive(Clone, Debug, Default)]
pub struct Deframer {
    buf: Vec<u8>,
    skipped: usize,
}

fn find_magic(buf: &[u8], from: usize) -> Option<usize> {
    (from..buf.len().saturating_sub(3)).find(|&i| buf[i..i + 4] == CONFIG_MAGIC || buf[i..i + 4] == EVENT_MAGIC)
}

impl Deframer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes discarded while hunting for a magic.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    fn discard(&mut self, n: usize) {
        self.buf.drain(..n);
    }

    /// Next complete packet or error; `None` when more bytes are needed.
    pub fn next_packet(&mut self) -> Option<Result<Packet, CodecError>> {
        match find_magic(&self.buf, 0) {
            Some(0) => {}
            Some(i) => {
                self.skipped += i;
                self.discard(i);
            }
            None => {
                // Keep a possible partial magic at the tail.
                let keep = self.buf.len().min(3);
                let drop = self.buf.len() - keep;
                self.skipped += drop;
                self.discard(drop);
                return None;
            }
        }
        let result = if self.buf[..4] == CONFIG_MAGIC {
            decode_config(&self.buf).map(|(p, n)| (Packet::Config(p), n))
        } else {
            decode_event(&self.buf).map(|(p, n)| (Packet::Event(p), n))
        };
        match result {
            Ok((p, n)) => {
                self.discard(n);
                Some(Ok(p))
            }
            Err(CodecError::Truncated { needed, .. }) => {
                // Incomplete so far; only give up on it once another packet starts.
                let next = find_magic(&self.buf, 1)?;
                self.discard(next);
                Some(Err(CodecError::Truncated {
                    needed,
                    available: next,
                }))
            }
            Err(e) => {
                self.discard(1);
                Some(Err(e))
            }
        }
    }

    /// Drains remaining bytes at end of stream; a partial frame is reported
    /// as truncated.
    pub fn finish(&mut self) -> Vec<Result<Packet, CodecError>> {
        let mut out = Vec::new();
        while let Some(r) = self.next_packet() {
            out.push(r);
        }
        if find_magic(&self.buf, 0) == Some(0) {
            let needed = if self.buf[..4] == CONFIG_MAGIC {
                config_len(&self.buf).unwrap_or(CONFIG_HEADER_LEN)
            } else {
                EVENT_PACKET_LEN
            };
            out.push(Err(CodecError::Truncated {
                needed,
                available: self.buf.len(),
            }));
        } else {
            self.skipped += self.buf.len();
        }
        self.buf.clear();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(n: u8) -> ConfigPacket {
        ConfigPacket {
            version: PROTOCOL_VERSION,
            epoch: 513,
            entries: (0..n)
                .map(|i| ConfigEntry {
                    electrode_id: i,
                    factor: [1, 2, 3, 4, 5, 6, 8, 10][usize::from(i) % 8],
                    threshold_tenths_uv: -200 - i16::from(i),
                })
                .collect(),
        }
    }

    fn event(ts: u32) -> SpikeEventPacket {
        SpikeEventPacket {
            version: PROTOCOL_VERSION,
            electrode_id: 7,
            timestamp: ts,
            peak_tenths_uv: -1234,
        }
    }

    #[test]
    fn single_electrode_layout() {
        let p = ConfigPacket {
            version: 1,
            epoch: 1,
            entries: vec![ConfigEntry {
                electrode_id: 0,
                factor: 1,
                threshold_tenths_uv: to_tenths(-2.7).unwrap(),
            }],
        };
        assert_eq!(p.entries[0].threshold_tenths_uv, -27);
        let b = encode_config(&p).unwrap();
        let body = [b'A', b'C', b'F', b'G', 1, 1, 0, 1, 0, 1, 0xE5, 0xFF];
        assert_eq!(&b[..12], &body);
        assert_eq!(b.len(), 16);
        assert_eq!(&b[12..], &crc32fast::hash(&body).to_le_bytes());
        assert_eq!(decode_config(&b).unwrap(), (p, 16));
    }

    #[test]
    fn event_layout_and_boundaries() {
        let p = SpikeEventPacket {
            version: 1,
            electrode_id: 3,
            timestamp: 0x0102_0304,
            peak_tenths_uv: 0,
        };
        let b = encode_event(&p);
        assert_eq!(b.len(), EVENT_PACKET_LEN);
        assert_eq!(&b[..12], &[b'A', b'S', b'P', b'K', 1, 3, 4, 3, 2, 1, 0, 0]);
        assert_eq!(decode_event(&b).unwrap().0, p);
        let zero = SpikeEventPacket { timestamp: 0, ..p };
        assert_eq!(decode_event(&encode_event(&zero)).unwrap().0, zero);
    }

    #[test]
    fn roundtrip_32_electrodes() {
        let p = config(32);
        let b = encode_config(&p).unwrap();
        assert_eq!(b.len(), config_packet_len(32));
        assert_eq!(decode_config(&b).unwrap().0, p);
        let mut big = config(0);
        big.entries = vec![config(1).entries[0]; 256];
        assert!(matches!(encode_config(&big), Err(CodecError::FieldRange(_))));
    }

    #[test]
    fn distinct_errors() {
        let b = encode_config(&config(4)).unwrap();
        for i in 4..b.len() {
            let mut m = b.clone();
            m[i] ^= 0x40;
            let e = decode_config(&m).unwrap_err();
            // A flipped count byte changes the length, which may now run past the end.
            assert!(
                matches!(e, CodecError::BadCrc { .. } | CodecError::Truncated { .. }),
                "byte {i}: {e:?}"
            );
        }
        let mut m = b.clone();
        m[0] = b'X';
        assert!(matches!(decode_config(&m), Err(CodecError::BadMagic(_))));
        assert!(matches!(
            decode_config(&b[..b.len() - 1]),
            Err(CodecError::Truncated { .. })
        ));
        assert!(matches!(decode_config(&b[..5]), Err(CodecError::Truncated { .. })));
        let v2 = ConfigPacket {
            version: 2,
            ..config(2)
        };
        assert!(matches!(
            decode_config(&encode_config(&v2).unwrap()),
            Err(CodecError::UnsupportedVersion(2))
        ));
        assert!(matches!(decode_event(&b), Err(CodecError::BadMagic(_))));
    }

    #[test]
    fn tenths_conversion() {
        assert_eq!(to_tenths(-2.7).unwrap(), -27);
        assert_eq!(to_tenths(3276.7).unwrap(), i16::MAX);
        assert!(to_tenths(-3276.9).is_err());
        assert!(to_tenths(f64::NAN).is_err());
        assert_eq!(to_tenths_saturating(-1e6), i16::MIN);
        assert_eq!(from_tenths(-27), -2.7);
    }

    #[test]
    fn deframer_resyncs_after_truncation_and_garbage() {
        let a = encode_event(&event(1));
        let c = encode_config(&config(3)).unwrap();
        let d = encode_event(&event(2));
        let mut stream = vec![0x00, 0x41, 0x99];
        stream.extend_from_slice(&a);
        stream.extend_from_slice(&c[..7]); // cut mid-header
        stream.extend_from_slice(&d);
        stream.extend_from_slice(&a[..10]); // cut at end of stream
        let mut df = Deframer::new();
        // Feed byte by byte to exercise partial buffering.
        let mut out = Vec::new();
        for b in &stream {
            df.push(std::slice::from_ref(b));
            while let Some(r) = df.next_packet() {
                out.push(r);
            }
        }
        out.extend(df.finish());
        assert_eq!(out.len(), 4, "{out:?}");
        assert_eq!(out[0], Ok(Packet::Event(event(1))));
        assert!(matches!(out[1], Err(CodecError::Truncated { .. })));
        assert_eq!(out[2], Ok(Packet::Event(event(2))));
        assert!(matches!(out[3], Err(CodecError::Truncated { .. })));
        assert_eq!(df.skipped(), 3);
        assert_eq!(df.buffered(), 0);
    }

    #[test]
    fn deframer_skips_corrupt_frame() {
        let mut bad = encode_event(&event(5));
        bad[8] ^= 1;
        let mut stream = bad.clone();
        stream.extend_from_slice(&encode_event(&event(6)));
        let mut df = Deframer::new();
        df.push(&stream);
        assert!(matches!(df.next_packet(), Some(Err(CodecError::BadCrc { .. }))));
        assert_eq!(df.next_packet(), Some(Ok(Packet::Event(event(6)))));
        assert_eq!(df.next_packet(), None);
    }

    proptest! {
        #[test]
        fn config_roundtrip(epoch: u16, entries in prop::collection::vec((any::<u8>(), 1u8..=10, any::<i16>()), 0..64)) {
            let p = ConfigPacket {
                version: PROTOCOL_VERSION,
                epoch,
                entries: entries.into_iter().map(|(electrode_id, factor, threshold_tenths_uv)| ConfigEntry { electrode_id, factor, threshold_tenths_uv }).collect(),
            };
            let b = encode_config(&p).unwrap();
            prop_assert_eq!(decode_config(&b).unwrap(), (p, b.len()));
        }

        #[test]
        fn event_roundtrip(electrode_id: u8, timestamp: u32, peak_tenths_uv: i16) {
            let p = SpikeEventPacket { version: PROTOCOL_VERSION, electrode_id, timestamp, peak_tenths_uv };
            prop_assert_eq!(decode_event(&encode_event(&p)).unwrap(), (p, EVENT_PACKET_LEN));
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode_config(&bytes);
            let _ = decode_event(&bytes);
            let mut df = Deframer::new();
            df.push(&bytes);
            while df.next_packet().is_some() {}
            df.finish();
        }
    }
}
