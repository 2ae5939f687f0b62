//! Shared oracles and fixtures for the integration and acceptance tests.
#![allow(dead_code)]

pub mod campaign;

use canids::canlog::Payload;
use canids::dbc::{ByteOrder, SignalSpec};

/// Reads one signal bit by bit, following the DBC numbering literally:
/// Intel signals walk upward from the start bit, Motorola signals walk
/// downward from the MSB and wrap to bit 7 of the next byte.
pub fn brute_force_raw(payload: &Payload, spec: &SignalSpec) -> Option<u64> {
    let bytes = payload.as_bytes();
    let mut pos = spec.start_bit as i64;
    let mut raw: u64 = 0;
    for i in 0..spec.bit_length as u32 {
        let (byte, bit) = ((pos / 8) as usize, (pos % 8) as u32);
        let b = (*bytes.get(byte)? >> bit) & 1;
        match spec.byte_order {
            ByteOrder::LittleEndian => {
                raw |= (b as u64) << i;
                pos += 1;
            }
            ByteOrder::BigEndian => {
                raw = (raw << 1) | b as u64;
                pos = if pos % 8 == 0 { pos + 15 } else { pos - 1 };
            }
        }
    }
    Some(raw)
}

/// Two's-complement interpretation of the oracle's raw bits.
pub fn brute_force_int(raw: u64, spec: &SignalSpec) -> f64 {
    let len = spec.bit_length as u32;
    if spec.is_signed() && len > 0 && (raw >> (len - 1)) & 1 == 1 {
        if len == 64 {
            raw as i64 as f64
        } else {
            (raw as i128 - (1i128 << len)) as f64
        }
    } else {
        raw as f64
    }
}

/// Whether every bit the signal touches lies inside `dlc` bytes.
pub fn fits(start: u16, len: u8, order: ByteOrder, dlc: usize) -> bool {
    let mut pos = start as i64;
    for _ in 0..len {
        if pos < 0 || pos as usize >= dlc * 8 {
            return false;
        }
        pos = match order {
            ByteOrder::LittleEndian => pos + 1,
            ByteOrder::BigEndian if pos % 8 == 0 => pos + 15,
            ByteOrder::BigEndian => pos - 1,
        };
    }
    true
}
