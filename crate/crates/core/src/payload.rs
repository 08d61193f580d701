//! Watermark payload framing.
//!
//! ```text
//! 16  magic "RW"
//!  8  version
//! 32  message length (bits)
//! 32  LSB backup length (bits)
//!  *  LSB backup
//!  *  message
//! 32  CRC-32 of everything above
//! ```
//!
//! The framed payload is zero-padded to the full histogram-shift capacity
//! before embedding; [`parse_payload`] reports how many bits it consumed so
//! the caller can check the padding.

use thiserror::Error;

use crate::bits::{crc32_bits, BitReader, BitWriter};

pub const PAYLOAD_MAGIC: u16 = u16::from_be_bytes(*b"RW");
pub const PAYLOAD_VERSION: u8 = 1;
/// Fixed fields: magic, version, two lengths, CRC.
pub const HEADER_BITS: usize = 16 + 8 + 32 + 32 + 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PayloadError {
    #[error("payload magic missing")]
    BadMagic,
    #[error("payload version {0} unsupported")]
    UnsupportedVersion(u8),
    #[error("payload CRC mismatch")]
    CrcMismatch,
    #[error("payload truncated")]
    Truncated,
    #[error("field length {0} does not fit 32 bits")]
    TooLong(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Payload {
    pub message: Vec<bool>,
    pub lsb_backup: Vec<bool>,
}

impl Payload {
    pub fn framed_len(&self) -> usize {
        HEADER_BITS + self.lsb_backup.len() + self.message.len()
    }
}

pub fn frame_payload(message: &[bool], lsb_backup: &[bool]) -> Result<Vec<bool>, PayloadError> {
    let msg_len = u32::try_from(message.len()).map_err(|_| PayloadError::TooLong(message.len()))?;
    let backup_len =
        u32::try_from(lsb_backup.len()).map_err(|_| PayloadError::TooLong(lsb_backup.len()))?;
    let mut w = BitWriter::new();
    w.push_uint(PAYLOAD_MAGIC as u64, 16);
    w.push_uint(PAYLOAD_VERSION as u64, 8);
    w.push_uint(msg_len as u64, 32);
    w.push_uint(backup_len as u64, 32);
    w.push_bits(lsb_backup);
    w.push_bits(message);
    let crc = crc32_bits(w.as_bits());
    w.push_uint(crc as u64, 32);
    Ok(w.into_bits())
}

/// Parses a framed payload from the front of `bits`; returns it with the
/// number of bits consumed.
pub fn parse_payload(bits: &[bool]) -> Result<(Payload, usize), PayloadError> {
    let mut r = BitReader::new(bits);
    let magic = r.read_uint(16).ok_or(PayloadError::BadMagic)?;
    if magic != PAYLOAD_MAGIC as u64 {
        return Err(PayloadError::BadMagic);
    }
    let version = r.read_uint(8).ok_or(PayloadError::Truncated)? as u8;
    if version != PAYLOAD_VERSION {
        return Err(PayloadError::UnsupportedVersion(version));
    }
    let msg_len = r.read_uint(32).ok_or(PayloadError::Truncated)? as usize;
    let backup_len = r.read_uint(32).ok_or(PayloadError::Truncated)? as usize;
    if msg_len.saturating_add(backup_len).saturating_add(32) > r.remaining() {
        return Err(PayloadError::Truncated);
    }
    let lsb_backup = r.read_bits(backup_len).ok_or(PayloadError::Truncated)?.to_vec();
    let message = r.read_bits(msg_len).ok_or(PayloadError::Truncated)?.to_vec();
    let covered = r.position();
    let crc = r.read_uint(32).ok_or(PayloadError::Truncated)? as u32;
    if crc != crc32_bits(&bits[..covered]) {
        return Err(PayloadError::CrcMismatch);
    }
    Ok((
        Payload {
            message,
            lsb_backup,
        },
        r.position(),
    ))
}
