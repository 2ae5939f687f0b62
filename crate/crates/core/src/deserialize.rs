//! Payload ⇄ physical signal conversion.
//!
//! Extraction loads the (zero padded) payload into a `u64` in the byte order
//! of the signal. Little-endian windows are then contiguous from the LSB;
//! big-endian (sawtooth numbered) windows are contiguous when the payload is
//! read big-endian, so both cases reduce to one shift and one mask.

use crate::canlog::Payload;
use crate::dbc::{ByteOrder, CanDatabase, MessageSpec, SignalSpec};
use crate::error::{Error, Result};

/// Bits extracted from a payload, right aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawSignal(pub u64);

/// Physical values of a message, in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalVector(pub Vec<f64>);

impl SignalVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn mask(len: u8) -> u64 {
    if len >= 64 {
        u64::MAX
    } else {
        (1u64 << len) - 1
    }
}

/// Shift that moves the signal's LSB to bit 0 of the order-specific word.
fn lsb_shift(spec: &SignalSpec) -> u32 {
    match spec.byte_order {
        ByteOrder::LittleEndian => spec.start_bit as u32,
        ByteOrder::BigEndian => 63 - spec.linear_span().1 as u32,
    }
}

fn load(bytes: &[u8; 8], order: ByteOrder) -> u64 {
    match order {
        ByteOrder::LittleEndian => u64::from_le_bytes(*bytes),
        ByteOrder::BigEndian => u64::from_be_bytes(*bytes),
    }
}

fn store(word: u64, order: ByteOrder) -> [u8; 8] {
    match order {
        ByteOrder::LittleEndian => word.to_le_bytes(),
        ByteOrder::BigEndian => word.to_be_bytes(),
    }
}

/// Reads a signal window from eight bytes; bits past the real payload read
/// as zero. The span must fit in 64 bits.
pub fn extract_padded(bytes: &[u8; 8], spec: &SignalSpec) -> u64 {
    (load(bytes, spec.byte_order) >> lsb_shift(spec)) & mask(spec.bit_length)
}

fn check_window(payload_bits: usize, spec: &SignalSpec) -> Result<()> {
    let (first, last) = spec.linear_span();
    if last >= payload_bits || last >= 64 {
        return Err(Error::WindowOutOfRange {
            signal: spec.name.clone(),
            first,
            last,
            available: payload_bits,
        });
    }
    Ok(())
}

pub fn extract_bits(payload: &Payload, spec: &SignalSpec) -> Result<RawSignal> {
    check_window(payload.bit_len(), spec)?;
    Ok(RawSignal(extract_padded(payload.padded(), spec)))
}

/// Integer value of the raw bits, two's complement for signed specs.
pub fn raw_to_int(raw: RawSignal, spec: &SignalSpec) -> f64 {
    if spec.is_signed() {
        let shift = 64 - spec.bit_length as u32;
        (((raw.0 << shift) as i64) >> shift) as f64
    } else {
        raw.0 as f64
    }
}

/// `raw × scale + offset`, without a range check.
pub fn physical(raw: RawSignal, spec: &SignalSpec) -> f64 {
    raw_to_int(raw, spec) * spec.scale + spec.offset
}

/// Tolerance applied to range checks, absorbing decimal scale factors that
/// are not exact in binary (e.g. `0.1`).
pub fn range_tolerance(spec: &SignalSpec) -> f64 {
    spec.scale.abs() * 1e-6
}

pub fn in_range(value: f64, spec: &SignalSpec) -> bool {
    let tol = range_tolerance(spec);
    value >= spec.min_phys - tol && value <= spec.max_phys + tol
}

/// Decodes, scales, and range-checks one signal.
pub fn decode_and_scale(raw: RawSignal, spec: &SignalSpec, aid: u16) -> Result<f64> {
    if raw.0 & !mask(spec.bit_length) != 0 {
        return Err(Error::NotRepresentable {
            signal: spec.name.clone(),
            value: raw.0 as f64,
            bits: spec.bit_length,
        });
    }
    let v = physical(raw, spec);
    if !in_range(v, spec) {
        return Err(Error::RangeViolation {
            aid,
            signal: spec.name.clone(),
            value: v,
            min: spec.min_phys,
            max: spec.max_phys,
        });
    }
    Ok(v)
}

/// Physical value with missing bits read as zero and no range check.
pub fn decode_lenient(payload: &Payload, spec: &SignalSpec) -> f64 {
    physical(RawSignal(extract_padded(payload.padded(), spec)), spec)
}

/// Strict deserialization of every declared signal of `aid`.
pub fn deserialize_message(aid: u16, payload: &Payload, db: &CanDatabase) -> Result<SignalVector> {
    let spec = db.message(aid).ok_or(Error::UnknownAid(aid))?;
    deserialize_with(spec, payload)
}

pub fn deserialize_with(spec: &MessageSpec, payload: &Payload) -> Result<SignalVector> {
    spec.signals
        .iter()
        .map(|s| extract_bits(payload, s).and_then(|raw| decode_and_scale(raw, s, spec.aid)))
        .collect::<Result<Vec<_>>>()
        .map(SignalVector)
}

/// Quantizes a physical value to raw bits.
pub fn encode_raw(value: f64, spec: &SignalSpec) -> Result<RawSignal> {
    let n = ((value - spec.offset) / spec.scale).round();
    let len = spec.bit_length as i32;
    let (lo, hi) = if spec.is_signed() {
        (-(2f64.powi(len - 1)), 2f64.powi(len - 1) - 1.0)
    } else {
        (0.0, 2f64.powi(len) - 1.0)
    };
    if !(n >= lo && n <= hi) {
        return Err(Error::NotRepresentable {
            signal: spec.name.clone(),
            value,
            bits: spec.bit_length,
        });
    }
    let raw = if spec.is_signed() { (n as i64) as u64 } else { n as u64 };
    Ok(RawSignal(raw & mask(spec.bit_length)))
}

/// Overwrites the signal window inside eight bytes.
pub fn insert_padded(bytes: &mut [u8; 8], spec: &SignalSpec, raw: RawSignal) {
    let shift = lsb_shift(spec);
    let m = mask(spec.bit_length) << shift;
    let word = load(bytes, spec.byte_order);
    let word = (word & !m) | ((raw.0 << shift) & m);
    *bytes = store(word, spec.byte_order);
}

/// Range-checks, quantizes and writes one signal into an existing payload,
/// leaving every other bit untouched.
pub fn write_signal(payload: &mut Payload, spec: &SignalSpec, aid: u16, value: f64) -> Result<()> {
    if !in_range(value, spec) {
        return Err(Error::RangeViolation {
            aid,
            signal: spec.name.clone(),
            value,
            min: spec.min_phys,
            max: spec.max_phys,
        });
    }
    check_window(payload.bit_len(), spec)?;
    let raw = encode_raw(value, spec)?;
    insert_padded(payload.padded_mut(), spec, raw);
    Ok(())
}

/// Byte-wise mask of the bits a signal occupies.
pub fn occupancy(spec: &SignalSpec) -> [u8; 8] {
    let mut b = [0u8; 8];
    insert_padded(&mut b, spec, RawSignal(u64::MAX));
    b
}

/// Builds a payload of `spec.dlc` bytes from one value per signal.
/// Bits outside every signal window are zero.
pub fn serialize_message(values: &SignalVector, spec: &MessageSpec) -> Result<Payload> {
    if values.0.len() != spec.signals.len() {
        return Err(Error::Shape(format!(
            "message {} has {} signals, got {} values",
            spec.name,
            spec.signals.len(),
            values.0.len()
        )));
    }
    let mut used = [0u8; 8];
    for s in &spec.signals {
        let occ = occupancy(s);
        if used.iter().zip(&occ).any(|(a, b)| a & b != 0) {
            return Err(Error::InvalidDatabase(format!(
                "message {}: signal {} overlaps another signal",
                spec.name, s.name
            )));
        }
        for (u, o) in used.iter_mut().zip(occ) {
            *u |= o;
        }
    }
    let mut payload = Payload::zeroed(spec.dlc as usize);
    for (s, &v) in spec.signals.iter().zip(&values.0) {
        write_signal(&mut payload, s, spec.aid, v)?;
    }
    Ok(payload)
}
