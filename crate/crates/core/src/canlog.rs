//! Text capture logs in the candump `-l` style, plus stream statistics.
//!
//! One message per line:
//!
//! ```text
//! (1.000000) can0 386#0102030405060708
//! ```
//!
//! Timestamps are kept as integer microseconds so that long logs do not
//! accumulate rounding drift.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use crate::dbc::{CanDatabase, MAX_AID};
use crate::error::{Error, Result};

pub const MICROS_PER_SEC: u64 = 1_000_000;

/// Converts seconds to whole microseconds, rounding to nearest.
pub fn secs_to_us(s: f64) -> u64 {
    (s * MICROS_PER_SEC as f64).round().max(0.0) as u64
}

pub fn us_to_secs(us: u64) -> f64 {
    us as f64 / MICROS_PER_SEC as f64
}

/// Up to eight payload bytes stored inline.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Payload {
    len: u8,
    bytes: [u8; 8],
}

impl Payload {
    pub const EMPTY: Payload = Payload { len: 0, bytes: [0; 8] };

    pub fn from_slice(b: &[u8]) -> Result<Self> {
        if b.len() > 8 {
            return Err(Error::Unsupported(format!("payload of {} bytes", b.len())));
        }
        let mut bytes = [0u8; 8];
        bytes[..b.len()].copy_from_slice(b);
        Ok(Payload {
            len: b.len() as u8,
            bytes,
        })
    }

    /// Payload of `len` bytes taken from the front of `bytes`; the rest is zeroed.
    pub fn new(bytes: [u8; 8], len: usize) -> Self {
        let len = len.min(8);
        let mut b = [0u8; 8];
        b[..len].copy_from_slice(&bytes[..len]);
        Payload {
            len: len as u8,
            bytes: b,
        }
    }

    pub fn zeroed(len: usize) -> Self {
        Payload::new([0; 8], len)
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit_len(&self) -> usize {
        self.len as usize * 8
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }

    /// All eight bytes, zero past `len`.
    pub fn padded(&self) -> &[u8; 8] {
        &self.bytes
    }

    pub(crate) fn padded_mut(&mut self) -> &mut [u8; 8] {
        &mut self.bytes
    }

    pub fn from_hex(hex: &str) -> Option<Self> {
        if !hex.len().is_multiple_of(2) || hex.len() > 16 {
            return None;
        }
        let mut bytes = [0u8; 8];
        for (i, chunk) in hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).ok()?;
            bytes[i] = u8::from_str_radix(s, 16).ok()?;
        }
        Some(Payload::new(bytes, hex.len() / 2))
    }

    pub fn to_hex(&self) -> String {
        self.as_bytes().iter().map(|b| format!("{b:02X}")).collect()
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Payload({})", self.to_hex())
    }
}

/// Interface name, inline like a kernel `IFNAMSIZ` buffer.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Iface {
    len: u8,
    name: [u8; 15],
}

impl Iface {
    pub fn new(name: &str) -> Option<Self> {
        let b = name.as_bytes();
        if b.is_empty() || b.len() > 15 || b.iter().any(|c| c.is_ascii_whitespace() || !c.is_ascii()) {
            return None;
        }
        let mut buf = [0u8; 15];
        buf[..b.len()].copy_from_slice(b);
        Some(Iface {
            len: b.len() as u8,
            name: buf,
        })
    }

    pub fn as_str(&self) -> &str {
        // Only ASCII is ever stored.
        std::str::from_utf8(&self.name[..self.len as usize]).unwrap_or("can0")
    }
}

impl Default for Iface {
    fn default() -> Self {
        Iface::new("can0").unwrap()
    }
}

impl fmt::Debug for Iface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One captured frame: (time, arbitration id, payload).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CanMessage {
    pub timestamp_us: u64,
    pub aid: u16,
    pub payload: Payload,
    pub iface: Iface,
}

impl CanMessage {
    pub fn new(timestamp_us: u64, aid: u16, payload: Payload) -> Self {
        CanMessage {
            timestamp_us,
            aid,
            payload,
            iface: Iface::default(),
        }
    }

    pub fn timestamp(&self) -> f64 {
        us_to_secs(self.timestamp_us)
    }

    pub fn dlc(&self) -> usize {
        self.payload.len()
    }
}

impl fmt::Display for CanMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}.{:06}) {} {:03X}#{}",
            self.timestamp_us / MICROS_PER_SEC,
            self.timestamp_us % MICROS_PER_SEC,
            self.iface.as_str(),
            self.aid,
            self.payload.to_hex()
        )
    }
}

/// Parses one data line. Returns `None` for blank and comment lines.
pub fn parse_line(line: &str) -> std::result::Result<Option<CanMessage>, String> {
    let line = line.trim_end_matches(['\r', '\n']);
    let t = line.trim();
    if t.is_empty() || t.starts_with('#') || t.starts_with("//") {
        return Ok(None);
    }
    let rest = line.strip_prefix('(').ok_or("expected '('")?;
    let (ts, rest) = rest.split_once(") ").ok_or("expected ') '")?;
    let (sec, usec) = ts.split_once('.').ok_or("expected sec.usec")?;
    if sec.is_empty() || !sec.bytes().all(|c| c.is_ascii_digit()) {
        return Err("bad seconds".into());
    }
    if usec.len() != 6 || !usec.bytes().all(|c| c.is_ascii_digit()) {
        return Err("microseconds must have 6 digits".into());
    }
    let sec: u64 = sec.parse().map_err(|_| "seconds overflow")?;
    let usec: u64 = usec.parse().map_err(|_| "bad microseconds")?;

    let (iface, frame) = rest.split_once(' ').ok_or("expected interface")?;
    let iface = Iface::new(iface).ok_or("bad interface name")?;
    let (aid, data) = frame.split_once('#').ok_or("expected '#'")?;
    if aid.is_empty() || aid.len() > 3 || !aid.bytes().all(|c| c.is_ascii_hexdigit()) {
        return Err("aid must be 1-3 hex digits".into());
    }
    let aid = u16::from_str_radix(aid, 16).map_err(|_| "bad aid")?;
    if aid as u32 > MAX_AID {
        return Err(format!("aid {aid:#X} exceeds 11 bits"));
    }
    if !data.bytes().all(|c| c.is_ascii_hexdigit()) {
        return Err("payload must be hex".into());
    }
    if data.len() % 2 != 0 {
        return Err("odd number of payload hex digits".into());
    }
    let payload = Payload::from_hex(data).ok_or("payload longer than 8 bytes")?;
    Ok(Some(CanMessage {
        timestamp_us: sec
            .checked_mul(MICROS_PER_SEC)
            .and_then(|s| s.checked_add(usec))
            .ok_or("timestamp overflow")?,
        aid,
        payload,
        iface,
    }))
}

/// Lazy line reader yielding messages in file order.
pub struct LogReader<R> {
    inner: R,
    line: usize,
    buf: String,
    skip_malformed: bool,
    skipped: usize,
}

impl<R: BufRead> LogReader<R> {
    pub fn new(inner: R) -> Self {
        LogReader {
            inner,
            line: 0,
            buf: String::new(),
            skip_malformed: false,
            skipped: 0,
        }
    }

    /// Drop malformed lines (counting them) instead of failing.
    pub fn skip_malformed(mut self, yes: bool) -> Self {
        self.skip_malformed = yes;
        self
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl<R: BufRead> Iterator for LogReader<R> {
    type Item = Result<CanMessage>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line += 1;
            match parse_line(&self.buf) {
                Ok(Some(m)) => return Some(Ok(m)),
                Ok(None) => continue,
                Err(_) if self.skip_malformed => {
                    self.skipped += 1;
                    continue;
                }
                Err(msg) => return Some(Err(Error::Syntax { line: self.line, msg })),
            }
        }
    }
}

pub fn read_log<R: BufRead>(reader: R) -> LogReader<R> {
    LogReader::new(reader)
}

/// Reads a whole log held in memory.
pub fn parse_log(text: &str) -> Result<Vec<CanMessage>> {
    read_log(text.as_bytes()).collect()
}

pub fn write_log<W: Write>(mut out: W, messages: &[CanMessage]) -> Result<()> {
    check_ordered(messages)?;
    for m in messages {
        writeln!(out, "{m}")?;
    }
    Ok(())
}

pub fn format_log(messages: &[CanMessage]) -> Result<String> {
    let mut buf = Vec::new();
    write_log(&mut buf, messages)?;
    Ok(String::from_utf8(buf).expect("log output is ascii"))
}

pub fn check_ordered(messages: &[CanMessage]) -> Result<()> {
    match messages.windows(2).position(|w| w[1].timestamp_us < w[0].timestamp_us) {
        Some(i) => Err(Error::Unordered { index: i + 1 }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq)]
pub struct StreamStats {
    pub aid: u16,
    pub sender: Option<String>,
    pub name: Option<String>,
    pub count: usize,
    /// Mean inter-arrival time in seconds; absent for single-message streams.
    pub mean_dt: Option<f64>,
    pub std_dt: f64,
    pub dlc: usize,
    pub signal_count: Option<usize>,
    pub unique_payloads: usize,
}

/// Per-stream timing and payload statistics, ordered by AID.
pub fn stream_stats(log: &[CanMessage], db: Option<&CanDatabase>) -> Vec<StreamStats> {
    struct Acc {
        count: usize,
        last_t: u64,
        dts: Vec<f64>,
        dlc: usize,
        uniq: HashSet<Payload>,
    }
    let mut acc: BTreeMap<u16, Acc> = BTreeMap::new();
    for m in log {
        let a = acc.entry(m.aid).or_insert_with(|| Acc {
            count: 0,
            last_t: m.timestamp_us,
            dts: Vec::new(),
            dlc: 0,
            uniq: HashSet::new(),
        });
        if a.count > 0 {
            a.dts.push(m.timestamp_us.saturating_sub(a.last_t) as f64);
        }
        a.count += 1;
        a.last_t = m.timestamp_us;
        a.dlc = m.dlc();
        a.uniq.insert(m.payload);
    }
    acc.into_iter()
        .map(|(aid, a)| {
            let spec = db.and_then(|d| d.message(aid));
            let (mean_dt, std_dt) = if a.dts.is_empty() {
                (None, 0.0)
            } else {
                let n = a.dts.len() as f64;
                let mean = a.dts.iter().sum::<f64>() / n;
                let var = a.dts.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
                (Some(mean / 1e6), var.sqrt() / 1e6)
            };
            StreamStats {
                aid,
                sender: spec.map(|s| s.sender.clone()),
                name: spec.map(|s| s.name.clone()),
                count: a.count,
                mean_dt,
                std_dt,
                dlc: a.dlc,
                signal_count: spec.map(|s| s.signals.len()),
                unique_payloads: a.uniq.len(),
            }
        })
        .collect()
}

/// Bit-flip frequency of one stream.
///
/// Element `k` is the fraction of consecutive message pairs in which bit `k`
/// toggled. Bits are numbered byte-major, MSB first within each byte.
#[derive(Debug, Clone, PartialEq)]
pub struct HammingProfile {
    pub aid: u16,
    pub d: Vec<f64>,
}

impl HammingProfile {
    pub fn sum(&self) -> f64 {
        self.d.iter().sum()
    }

    /// Number of bit positions that flipped at least once.
    pub fn flipped_bits(&self) -> usize {
        self.d.iter().filter(|&&v| v > 0.0).count()
    }
}

pub fn hamming_profile(log: &[CanMessage], aid: u16) -> Result<HammingProfile> {
    let payloads: Vec<&Payload> = log.iter().filter(|m| m.aid == aid).map(|m| &m.payload).collect();
    if payloads.len() < 2 {
        return Err(Error::Stream(aid, "needs at least two messages".into()));
    }
    let len = payloads[0].len();
    if payloads.iter().any(|p| p.len() != len) {
        return Err(Error::Stream(aid, "mixed payload lengths".into()));
    }
    let mut flips = vec![0u64; len * 8];
    for pair in payloads.windows(2) {
        for (byte, (a, b)) in pair[0].as_bytes().iter().zip(pair[1].as_bytes()).enumerate() {
            let x = a ^ b;
            for bit in 0..8 {
                if x & (0x80 >> bit) != 0 {
                    flips[byte * 8 + bit] += 1;
                }
            }
        }
    }
    let n = (payloads.len() - 1) as f64;
    Ok(HammingProfile {
        aid,
        d: flips.into_iter().map(|f| f as f64 / n).collect(),
    })
}

/// Profiles of every stream with at least two equal-length messages.
#[derive(Debug, Clone, PartialEq)]
pub struct HammingSummary {
    pub profiles: Vec<HammingProfile>,
    /// Streams that could not be profiled, with the reason.
    pub skipped: Vec<(u16, String)>,
}

impl HammingSummary {
    /// Sum of all `d` elements over all profiled streams.
    pub fn total(&self) -> f64 {
        self.profiles.iter().map(HammingProfile::sum).sum()
    }

    pub fn flipped_bits(&self) -> usize {
        self.profiles.iter().map(HammingProfile::flipped_bits).sum()
    }
}

pub fn hamming_all(log: &[CanMessage]) -> HammingSummary {
    let aids: Vec<u16> = log
        .iter()
        .map(|m| m.aid)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut summary = HammingSummary {
        profiles: Vec::new(),
        skipped: Vec::new(),
    };
    for aid in aids {
        match hamming_profile(log, aid) {
            Ok(p) => summary.profiles.push(p),
            Err(e) => summary.skipped.push((aid, e.to_string())),
        }
    }
    summary
}
