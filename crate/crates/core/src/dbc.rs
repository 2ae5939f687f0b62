//! CAN database (DBC) parsing and feature signal selection.
//!
//! Only the constructs needed to lay out plain signals are understood:
//! `VERSION`, `BU_`, `BO_` and non-multiplexed `SG_` lines. Everything else
//! (comments, attributes, value tables, namespace blocks) is skipped.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};

use log::debug;
use sha2::{Digest, Sha256};

use crate::canlog::CanMessage;
use crate::deserialize;
use crate::error::{Error, Result};
use crate::par;

/// Largest standard (11-bit) arbitration identifier.
pub const MAX_AID: u32 = 0x7FF;

/// Maximum classic CAN payload length in bytes.
pub const MAX_DLC: u8 = 8;

/// Pseudo message some tools emit to hold orphan signals.
const INDEPENDENT_SIG_MSG: u32 = 0xC000_0000;

/// Lowercase substrings marking checksums, counters and similar signals.
pub const DEFAULT_KEYWORDS: &[&str] = &["sum", "alive", "msgcount", "msgcnt", "paritybit", "mul_code"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ByteOrder {
    /// `@1`, Intel layout.
    LittleEndian,
    /// `@0`, Motorola layout with MSB-first sawtooth numbering.
    BigEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signedness {
    Unsigned,
    Signed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub name: String,
    pub start_bit: u16,
    pub bit_length: u8,
    pub byte_order: ByteOrder,
    pub signedness: Signedness,
    pub scale: f64,
    pub offset: f64,
    pub min_phys: f64,
    pub max_phys: f64,
    pub unit: String,
    pub receivers: Vec<String>,
}

impl SignalSpec {
    /// Unsigned 8-bit-style helper used by tests and the synthetic database.
    pub fn new(name: &str, start_bit: u16, bit_length: u8, byte_order: ByteOrder) -> Self {
        let max = if bit_length >= 64 {
            u64::MAX as f64
        } else {
            ((1u64 << bit_length) - 1) as f64
        };
        SignalSpec {
            name: name.to_string(),
            start_bit,
            bit_length,
            byte_order,
            signedness: Signedness::Unsigned,
            scale: 1.0,
            offset: 0.0,
            min_phys: 0.0,
            max_phys: max,
            unit: String::new(),
            receivers: Vec::new(),
        }
    }

    pub fn signed(mut self) -> Self {
        self.signedness = Signedness::Signed;
        self
    }

    pub fn scaled(mut self, scale: f64, offset: f64) -> Self {
        self.scale = scale;
        self.offset = offset;
        self
    }

    pub fn range(mut self, min: f64, max: f64) -> Self {
        self.min_phys = min;
        self.max_phys = max;
        self
    }

    pub fn unit(mut self, unit: &str) -> Self {
        self.unit = unit.to_string();
        self
    }

    pub fn is_signed(&self) -> bool {
        self.signedness == Signedness::Signed
    }

    /// Inclusive range of linear bit positions covered by the signal.
    ///
    /// Little-endian positions count from the LSB of byte 0 upward;
    /// big-endian positions count from the MSB of byte 0 downward. In both
    /// cases `bit / 8` is the byte index, so the last position decides how
    /// many payload bytes the signal needs.
    pub fn linear_span(&self) -> (usize, usize) {
        let len = self.bit_length as usize;
        match self.byte_order {
            ByteOrder::LittleEndian => {
                let first = self.start_bit as usize;
                (first, first + len - 1)
            }
            ByteOrder::BigEndian => {
                let s = self.start_bit as usize;
                let msb = (s / 8) * 8 + (7 - s % 8);
                (msb, msb + len - 1)
            }
        }
    }

    /// Number of payload bytes the signal window touches.
    pub fn required_bytes(&self) -> usize {
        self.linear_span().1 / 8 + 1
    }

    /// Physical value range is degenerate, so the signal can never vary.
    pub fn has_static_range(&self) -> bool {
        self.min_phys >= self.max_phys
    }

    fn validate(&self, dlc: u8) -> Result<()> {
        if self.bit_length == 0 || self.bit_length > 64 {
            return Err(Error::InvalidDatabase(format!(
                "signal {}: bit length {} not in 1..=64",
                self.name, self.bit_length
            )));
        }
        if self.scale == 0.0 || !self.scale.is_finite() {
            return Err(Error::InvalidDatabase(format!(
                "signal {}: scale must be nonzero",
                self.name
            )));
        }
        if !(self.min_phys <= self.max_phys) {
            return Err(Error::InvalidDatabase(format!(
                "signal {}: min {} > max {}",
                self.name, self.min_phys, self.max_phys
            )));
        }
        let (first, last) = self.linear_span();
        let available = dlc as usize * 8;
        if last >= available {
            return Err(Error::WindowOutOfRange {
                signal: self.name.clone(),
                first,
                last,
                available,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MessageSpec {
    pub aid: u16,
    pub name: String,
    pub dlc: u8,
    pub sender: String,
    pub signals: Vec<SignalSpec>,
}

impl MessageSpec {
    pub fn signal(&self, name: &str) -> Option<&SignalSpec> {
        self.signals.iter().find(|s| s.name == name)
    }

    fn validate(&self) -> Result<()> {
        if self.aid as u32 > MAX_AID {
            return Err(Error::Unsupported(format!("extended aid {:#X}", self.aid)));
        }
        if self.dlc > MAX_DLC {
            return Err(Error::Unsupported(format!(
                "message {}: dlc {} > 8",
                self.name, self.dlc
            )));
        }
        let mut names = HashSet::new();
        for s in &self.signals {
            if !names.insert(s.name.as_str()) {
                return Err(Error::InvalidDatabase(format!(
                    "message {}: duplicate signal {}",
                    self.name, s.name
                )));
            }
            s.validate(self.dlc)?;
        }
        Ok(())
    }
}

/// A parsed CAN database, keyed by arbitration id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CanDatabase {
    pub version: Option<String>,
    pub ecus: Vec<String>,
    pub messages: BTreeMap<u16, MessageSpec>,
}

impl CanDatabase {
    /// Builds a validated database from message specs.
    pub fn new(ecus: Vec<String>, messages: Vec<MessageSpec>) -> Result<Self> {
        let mut db = CanDatabase {
            version: None,
            ecus,
            messages: BTreeMap::new(),
        };
        for m in messages {
            m.validate()?;
            if db.messages.contains_key(&m.aid) {
                return Err(Error::InvalidDatabase(format!("duplicate aid {}", m.aid)));
            }
            db.messages.insert(m.aid, m);
        }
        Ok(db)
    }

    pub fn message(&self, aid: u16) -> Option<&MessageSpec> {
        self.messages.get(&aid)
    }

    pub fn message_by_name(&self, name: &str) -> Option<&MessageSpec> {
        self.messages.values().find(|m| m.name == name)
    }

    /// Finds the message that declares signal `name`.
    pub fn find_signal(&self, name: &str) -> Option<(&MessageSpec, &SignalSpec)> {
        self.messages.values().find_map(|m| m.signal(name).map(|s| (m, s)))
    }

    pub fn signal_count(&self) -> usize {
        self.messages.values().map(|m| m.signals.len()).sum()
    }

    pub fn to_dbc_string(&self) -> String {
        self.to_string()
    }
}

fn fmt_receivers(r: &[String]) -> String {
    if r.is_empty() {
        "Vector__XXX".to_string()
    } else {
        r.join(",")
    }
}

impl fmt::Display for CanDatabase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "VERSION \"{}\"", self.version.as_deref().unwrap_or(""))?;
        writeln!(f)?;
        writeln!(f, "BU_: {}", self.ecus.join(" "))?;
        for m in self.messages.values() {
            writeln!(f)?;
            writeln!(f, "BO_ {} {}: {} {}", m.aid, m.name, m.dlc, m.sender)?;
            for s in &m.signals {
                let order = match s.byte_order {
                    ByteOrder::LittleEndian => '1',
                    ByteOrder::BigEndian => '0',
                };
                let sign = if s.is_signed() { '-' } else { '+' };
                writeln!(
                    f,
                    " SG_ {} : {}|{}@{}{} ({},{}) [{}|{}] \"{}\" {}",
                    s.name,
                    s.start_bit,
                    s.bit_length,
                    order,
                    sign,
                    s.scale,
                    s.offset,
                    s.min_phys,
                    s.max_phys,
                    s.unit,
                    fmt_receivers(&s.receivers)
                )?;
            }
        }
        Ok(())
    }
}

/// Parses the supported DBC subset.
pub fn parse_dbc(text: &str) -> Result<CanDatabase> {
    let mut db = CanDatabase::default();
    let mut current: Option<MessageSpec> = None;
    let mut skipping_string = false;

    let finish = |db: &mut CanDatabase, msg: Option<MessageSpec>, line: usize| -> Result<()> {
        if let Some(m) = msg {
            m.validate().map_err(|e| match e {
                Error::Unsupported(_) => e,
                other => Error::Syntax {
                    line,
                    msg: other.to_string(),
                },
            })?;
            if db.messages.contains_key(&m.aid) {
                return Err(Error::Syntax {
                    line,
                    msg: format!("duplicate aid {}", m.aid),
                });
            }
            db.messages.insert(m.aid, m);
        }
        Ok(())
    };

    let mut msg_line = 0;
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if skipping_string {
            if quote_count(raw_line) % 2 == 1 {
                skipping_string = false;
            }
            continue;
        }
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with("//") {
            continue;
        }
        let keyword = line.split(|c: char| c.is_whitespace() || c == ':').next().unwrap_or("");
        match keyword {
            "VERSION" => {
                let v = line["VERSION".len()..].trim();
                db.version = Some(unquote(v).ok_or_else(|| syntax(lineno, "expected quoted version"))?);
            }
            "BU_" => {
                let rest = line["BU_".len()..].trim_start();
                let rest = rest
                    .strip_prefix(':')
                    .ok_or_else(|| syntax(lineno, "expected ':' after BU_"))?;
                db.ecus = rest.split_whitespace().map(str::to_string).collect();
            }
            "BO_" => {
                finish(&mut db, current.take(), msg_line)?;
                msg_line = lineno;
                current = parse_bo(line, lineno)?;
            }
            "SG_" => {
                let sig = parse_sg(line, lineno)?;
                match current.as_mut() {
                    Some(m) => {
                        // Window checks are reported at the signal line.
                        sig.validate(m.dlc).map_err(|e| match e {
                            e @ Error::WindowOutOfRange { .. } => Error::Syntax {
                                line: lineno,
                                msg: e.to_string(),
                            },
                            other => Error::Syntax {
                                line: lineno,
                                msg: other.to_string(),
                            },
                        })?;
                        m.signals.push(sig);
                    }
                    None if msg_line > 0 => {
                        // Signal of a skipped pseudo message.
                    }
                    None => return Err(syntax(lineno, "SG_ outside of a BO_ block")),
                }
            }
            _ => {
                debug!("dbc line {lineno}: skipping '{keyword}'");
                if quote_count(line) % 2 == 1 {
                    skipping_string = true;
                }
            }
        }
    }
    finish(&mut db, current.take(), msg_line)?;
    Ok(db)
}

fn syntax(line: usize, msg: &str) -> Error {
    Error::Syntax {
        line,
        msg: msg.to_string(),
    }
}

fn quote_count(s: &str) -> usize {
    let mut n = 0;
    let mut escaped = false;
    for c in s.chars() {
        match c {
            '\\' if !escaped => escaped = true,
            '"' if !escaped => n += 1,
            _ => escaped = false,
        }
    }
    n
}

fn unquote(s: &str) -> Option<String> {
    let s = s.trim();
    let inner = s.strip_prefix('"')?.strip_suffix('"')?;
    Some(inner.to_string())
}

fn parse_bo(line: &str, lineno: usize) -> Result<Option<MessageSpec>> {
    // BO_ <id> <name>: <dlc> <sender>
    let rest = line["BO_".len()..].trim();
    let (head, tail) = rest
        .split_once(':')
        .ok_or_else(|| syntax(lineno, "expected ':' in BO_"))?;
    let mut head_it = head.split_whitespace();
    let id: u32 = head_it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| syntax(lineno, "bad message id"))?;
    let name = head_it.next().ok_or_else(|| syntax(lineno, "missing message name"))?;
    if head_it.next().is_some() {
        return Err(syntax(lineno, "unexpected token before ':'"));
    }
    let mut tail_it = tail.split_whitespace();
    let dlc: u8 = tail_it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| syntax(lineno, "bad dlc"))?;
    let sender = tail_it.next().unwrap_or("Vector__XXX").to_string();

    if id == INDEPENDENT_SIG_MSG {
        debug!("dbc line {lineno}: skipping independent signal pseudo message");
        return Ok(None);
    }
    if id > MAX_AID {
        return Err(Error::Unsupported(format!("line {lineno}: extended id {id:#X}")));
    }
    if dlc > MAX_DLC {
        return Err(Error::Unsupported(format!("line {lineno}: dlc {dlc} > 8")));
    }
    Ok(Some(MessageSpec {
        aid: id as u16,
        name: name.to_string(),
        dlc,
        sender,
        signals: Vec::new(),
    }))
}

fn parse_sg(line: &str, lineno: usize) -> Result<SignalSpec> {
    // SG_ <name> [mux] : <start>|<len>@<order><sign> (<scale>,<offset>) [<min>|<max>] "<unit>" <rx>
    let rest = line["SG_".len()..].trim();
    let (head, body) = rest
        .split_once(':')
        .ok_or_else(|| syntax(lineno, "expected ':' in SG_"))?;
    let mut head_it = head.split_whitespace();
    let name = head_it.next().ok_or_else(|| syntax(lineno, "missing signal name"))?;
    if let Some(mux) = head_it.next() {
        if mux.starts_with('m') || mux.starts_with('M') {
            return Err(Error::Unsupported(format!(
                "line {lineno}: multiplexed signal {name} ({mux})"
            )));
        }
        return Err(syntax(lineno, "unexpected token before ':'"));
    }
    let body = body.trim();

    let (layout, body) = body
        .split_once(char::is_whitespace)
        .ok_or_else(|| syntax(lineno, "truncated signal definition"))?;
    let (start, layout) = layout
        .split_once('|')
        .ok_or_else(|| syntax(lineno, "expected start|length"))?;
    let (len, layout) = layout
        .split_once('@')
        .ok_or_else(|| syntax(lineno, "expected @order"))?;
    let start_bit: u16 = start.parse().map_err(|_| syntax(lineno, "bad start bit"))?;
    let bit_length: u8 = len.parse().map_err(|_| syntax(lineno, "bad bit length"))?;
    let mut flags = layout.chars();
    let byte_order = match flags.next() {
        Some('1') => ByteOrder::LittleEndian,
        Some('0') => ByteOrder::BigEndian,
        _ => return Err(syntax(lineno, "byte order must be 0 or 1")),
    };
    let signedness = match flags.next() {
        Some('+') => Signedness::Unsigned,
        Some('-') => Signedness::Signed,
        _ => return Err(syntax(lineno, "sign must be + or -")),
    };
    if flags.next().is_some() {
        return Err(syntax(lineno, "trailing characters after sign"));
    }
    if start_bit > 511 {
        return Err(syntax(lineno, "start bit beyond 511"));
    }

    let body = body.trim_start();
    let (factor, body) = bracketed(body, '(', ')').ok_or_else(|| syntax(lineno, "expected (scale,offset)"))?;
    let (scale, offset) = factor
        .split_once(',')
        .ok_or_else(|| syntax(lineno, "expected scale,offset"))?;
    let scale: f64 = scale.trim().parse().map_err(|_| syntax(lineno, "bad scale"))?;
    let offset: f64 = offset.trim().parse().map_err(|_| syntax(lineno, "bad offset"))?;

    let (range, body) = bracketed(body.trim_start(), '[', ']').ok_or_else(|| syntax(lineno, "expected [min|max]"))?;
    let (min, max) = range
        .split_once('|')
        .ok_or_else(|| syntax(lineno, "expected min|max"))?;
    let min_phys: f64 = min.trim().parse().map_err(|_| syntax(lineno, "bad min"))?;
    let max_phys: f64 = max.trim().parse().map_err(|_| syntax(lineno, "bad max"))?;

    let body = body.trim_start();
    let body = body
        .strip_prefix('"')
        .ok_or_else(|| syntax(lineno, "expected quoted unit"))?;
    let (unit, body) = body
        .split_once('"')
        .ok_or_else(|| syntax(lineno, "unterminated unit"))?;

    let receivers = body
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty() && *t != "Vector__XXX")
        .map(str::to_string)
        .collect();

    if scale == 0.0 {
        return Err(syntax(lineno, &format!("signal {name}: scale must be nonzero")));
    }

    Ok(SignalSpec {
        name: name.to_string(),
        start_bit,
        bit_length,
        byte_order,
        signedness,
        scale,
        offset,
        min_phys,
        max_phys,
        unit: unit.to_string(),
        receivers,
    })
}

fn bracketed(s: &str, open: char, close: char) -> Option<(&str, &str)> {
    let s = s.strip_prefix(open)?;
    let end = s.find(close)?;
    Some((&s[..end], &s[end + 1..]))
}

// ---------------------------------------------------------------------------
// Signal selection

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSignal {
    /// Global feature index, 1-based.
    pub index: usize,
    pub aid: u16,
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExclusionReason {
    Static,
    Keyword(String),
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExclusionReason::Static => f.write_str("static"),
            ExclusionReason::Keyword(k) => write!(f, "keyword:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub aid: u16,
    pub name: String,
    pub reason: ExclusionReason,
}

/// The ordered set of signals that make up one feature vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignalSelection {
    pub included: Vec<SelectedSignal>,
    pub excluded: Vec<Exclusion>,
    /// Diagnostics such as AIDs missing from the training log. Not part of
    /// the manifest.
    pub warnings: Vec<String>,
}

impl SignalSelection {
    /// Number of features `x`.
    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.included.iter().map(|s| s.name.as_str()).collect()
    }

    /// 1-based index of a signal by name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.included.iter().find(|s| s.name == name).map(|s| s.index)
    }

    /// Distinct AIDs carrying at least one selected signal, ascending.
    pub fn aids(&self) -> Vec<u16> {
        let mut aids: Vec<u16> = self.included.iter().map(|s| s.aid).collect();
        aids.dedup();
        aids
    }

    pub fn to_manifest(&self) -> String {
        let mut out = String::from("# signal selection v1\n[included]\n");
        for s in &self.included {
            let _ = writeln!(out, "{}\t{:03X}\t{}\t{}\t{}", s.index, s.aid, s.name, s.min, s.max);
        }
        out.push_str("[excluded]\n");
        for e in &self.excluded {
            let _ = writeln!(out, "{:03X}\t{}\t{}", e.aid, e.name, e.reason);
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Included,
            Excluded,
        }
        let mut sel = SignalSelection::default();
        let mut section = Section::None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[included]" => section = Section::Included,
                "[excluded]" => section = Section::Excluded,
                _ => {
                    let fields: Vec<&str> = line.split('\t').collect();
                    let aid_of = |s: &str| u16::from_str_radix(s, 16).map_err(|_| syntax(lineno, "bad aid hex"));
                    match section {
                        Section::Included => {
                            if fields.len() != 5 {
                                return Err(syntax(lineno, "expected 5 tab-separated fields"));
                            }
                            let index: usize = fields[0].parse().map_err(|_| syntax(lineno, "bad index"))?;
                            if index != sel.included.len() + 1 {
                                return Err(syntax(lineno, "indices must be contiguous from 1"));
                            }
                            sel.included.push(SelectedSignal {
                                index,
                                aid: aid_of(fields[1])?,
                                name: fields[2].to_string(),
                                min: fields[3].parse().map_err(|_| syntax(lineno, "bad min"))?,
                                max: fields[4].parse().map_err(|_| syntax(lineno, "bad max"))?,
                            });
                        }
                        Section::Excluded => {
                            if fields.len() != 3 {
                                return Err(syntax(lineno, "expected 3 tab-separated fields"));
                            }
                            let reason = match fields[2] {
                                "static" => ExclusionReason::Static,
                                r => match r.strip_prefix("keyword:") {
                                    Some(k) => ExclusionReason::Keyword(k.to_string()),
                                    None => return Err(syntax(lineno, "bad exclusion reason")),
                                },
                            };
                            sel.excluded.push(Exclusion {
                                aid: aid_of(fields[0])?,
                                name: fields[1].to_string(),
                                reason,
                            });
                        }
                        Section::None => return Err(syntax(lineno, "data before section header")),
                    }
                }
            }
        }
        Ok(sel)
    }

    /// Stable 64-bit fingerprint of the manifest.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_manifest().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_be_bytes(b)
    }
}

/// Picks the signals that take part in feature vectors.
///
/// A signal is dropped when its lowercased name contains one of `keywords`,
/// when its declared range is degenerate, or when its decoded value never
/// changes across `training_log`. Survivors are numbered in ascending AID
/// order, then declaration order.
pub fn select_signals(db: &CanDatabase, training_log: &[CanMessage], keywords: &[&str]) -> SignalSelection {
    let keywords: Vec<String> = keywords.iter().map(|k| k.to_lowercase()).collect();

    let mut by_aid: BTreeMap<u16, Vec<&CanMessage>> = BTreeMap::new();
    for m in training_log {
        if db.messages.contains_key(&m.aid) {
            by_aid.entry(m.aid).or_default().push(m);
        }
    }

    let specs: Vec<&MessageSpec> = db.messages.values().collect();
    // Per message: for each signal, whether its value varied over the log
    // (None when the AID never appeared).
    let variation: Vec<Option<Vec<bool>>> = par::map(&specs, |spec| {
        let msgs = by_aid.get(&spec.aid)?;
        Some(
            spec.signals
                .iter()
                .map(|sig| {
                    let mut first: Option<f64> = None;
                    msgs.iter().any(|m| {
                        let v = deserialize::decode_lenient(&m.payload, sig);
                        match first {
                            None => {
                                first = Some(v);
                                false
                            }
                            Some(f) => v.to_bits() != f.to_bits(),
                        }
                    })
                })
                .collect(),
        )
    });

    let mut sel = SignalSelection::default();
    for (spec, varied) in specs.iter().zip(variation) {
        if varied.is_none() {
            sel.warnings.push(format!(
                "aid {:03X} ({}) absent from training log; signals kept",
                spec.aid, spec.name
            ));
        }
        for (k, sig) in spec.signals.iter().enumerate() {
            let lname = sig.name.to_lowercase();
            let reason = if let Some(kw) = keywords.iter().find(|kw| lname.contains(kw.as_str())) {
                Some(ExclusionReason::Keyword(kw.clone()))
            } else if sig.has_static_range() || matches!(&varied, Some(v) if !v[k]) {
                Some(ExclusionReason::Static)
            } else {
                None
            };
            match reason {
                Some(reason) => sel.excluded.push(Exclusion {
                    aid: spec.aid,
                    name: sig.name.clone(),
                    reason,
                }),
                None => sel.included.push(SelectedSignal {
                    index: sel.included.len() + 1,
                    aid: spec.aid,
                    name: sig.name.clone(),
                    min: sig.min_phys,
                    max: sig.max_phys,
                }),
            }
        }
    }
    sel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canlog::Payload;

    const FIG2: &str = r#"VERSION ""

NS_ :
    NS_DESC_
    CM_

BS_:

BU_: ABS EMS CLU

BO_ 902 WHL_SPD_11: 8 ABS
 SG_ WHL_SPD_FL : 0|14@1+ (0.03125,0) [0|511.96875] "km/h" EMS,CLU
 SG_ WHL_SPD_AliveCounter_LSB : 14|2@1+ (1,0) [0|3] "" EMS
 SG_ WHL_SPD_FR : 16|14@1+ (0.03125,0) [0|511.96875] "km/h" EMS
 SG_ WHL_SPD_AliveCounter_MSB : 30|2@1+ (1,0) [0|3] "" EMS
 SG_ WHL_SPD_RL : 32|14@1+ (0.03125,0) [0|511.96875] "km/h" EMS
 SG_ WHL_SPD_Checksum_LSB : 46|2@1+ (1,0) [0|3] "" EMS
 SG_ WHL_SPD_RR : 48|14@1+ (0.03125,0) [0|511.96875] "km/h" EMS
 SG_ WHL_SPD_Checksum_MSB : 62|2@1+ (1,0) [0|3] "" EMS

CM_ SG_ 902 WHL_SPD_FL "front left
wheel speed";
BA_DEF_ "BusType" STRING ;
"#;

    #[test]
    fn parses_wheel_speed_message() {
        let db = parse_dbc(FIG2).unwrap();
        assert_eq!(db.ecus, vec!["ABS", "EMS", "CLU"]);
        let m = db.message(902).unwrap();
        assert_eq!(m.name, "WHL_SPD_11");
        assert_eq!(m.dlc, 8);
        assert_eq!(m.sender, "ABS");
        assert_eq!(m.signals.len(), 8);
        let fl = &m.signals[0];
        assert_eq!(fl.scale, 0.03125);
        assert_eq!(fl.unit, "km/h");
        assert_eq!(fl.receivers, vec!["EMS", "CLU"]);
    }

    #[test]
    fn single_signal_message() {
        let db =
            parse_dbc("BO_ 902 WHL_SPD_11: 8 ABS\n SG_ WHL_SPD_FL : 0|14@1+ (0.03125,0) [0|511.96875] \"km/h\" EMS\n")
                .unwrap();
        let m = &db.messages[&902];
        assert_eq!(
            (m.aid, m.name.as_str(), m.dlc, m.sender.as_str()),
            (902, "WHL_SPD_11", 8, "ABS")
        );
        assert_eq!(m.signals.len(), 1);
    }

    #[test]
    fn identity_scaled_little_endian_signal() {
        let db = parse_dbc("BO_ 1 M: 8 E\n SG_ X : 0|8@1+ (1,0) [0|255] \"\" RX\n").unwrap();
        let s = &db.messages[&1].signals[0];
        assert_eq!(s.start_bit, 0);
        assert_eq!(s.bit_length, 8);
        assert_eq!(s.byte_order, ByteOrder::LittleEndian);
        assert_eq!(s.signedness, Signedness::Unsigned);
        assert_eq!((s.scale, s.offset), (1.0, 0.0));
        assert_eq!(s.receivers, vec!["RX"]);
    }

    #[test]
    fn big_endian_signed_signal() {
        let db = parse_dbc("BO_ 1 M: 8 E\n SG_ Y : 7|12@0- (0.1,-5) [-209.8|199.7] \"degC\" RX\n").unwrap();
        let s = &db.messages[&1].signals[0];
        assert_eq!(s.byte_order, ByteOrder::BigEndian);
        assert_eq!(s.signedness, Signedness::Signed);
        assert_eq!((s.scale, s.offset), (0.1, -5.0));
        assert_eq!((s.min_phys, s.max_phys), (-209.8, 199.7));
        assert_eq!(s.unit, "degC");
        // MSB at bit 7 of byte 0, runs 12 bits into byte 1.
        assert_eq!(s.linear_span(), (0, 11));
        assert_eq!(s.required_bytes(), 2);
    }

    #[test]
    fn rejects_bad_documents() {
        let dup = "BO_ 1 A: 8 E\nBO_ 1 B: 8 E\n";
        assert!(matches!(
            parse_dbc(dup),
            Err(Error::Syntax { line: 2, .. }) | Err(Error::Syntax { line: 1, .. })
        ));

        let wide = "BO_ 1 A: 2 E\n SG_ X : 8|16@1+ (1,0) [0|1] \"\" R\n";
        assert!(matches!(parse_dbc(wide), Err(Error::Syntax { line: 2, .. })));

        let zero = "BO_ 1 A: 8 E\n SG_ X : 0|8@1+ (0,0) [0|1] \"\" R\n";
        assert!(matches!(parse_dbc(zero), Err(Error::Syntax { line: 2, .. })));

        let mux = "BO_ 1 A: 8 E\n SG_ X m0 : 0|8@1+ (1,0) [0|1] \"\" R\n";
        assert!(matches!(parse_dbc(mux), Err(Error::Unsupported(_))));
        let mux = "BO_ 1 A: 8 E\n SG_ X M : 0|8@1+ (1,0) [0|1] \"\" R\n";
        assert!(matches!(parse_dbc(mux), Err(Error::Unsupported(_))));

        let garbage = "BO_ 1 A: 8 E\n SG_ X : 0|8@2+ (1,0) [0|1] \"\" R\n";
        assert!(matches!(parse_dbc(garbage), Err(Error::Syntax { line: 2, .. })));

        let ext = "BO_ 2147483905 A: 8 E\n";
        assert!(matches!(parse_dbc(ext), Err(Error::Unsupported(_))));

        let orphan = " SG_ X : 0|8@1+ (1,0) [0|1] \"\" R\n";
        assert!(matches!(parse_dbc(orphan), Err(Error::Syntax { line: 1, .. })));
    }

    #[test]
    fn big_endian_window_past_dlc() {
        // MSB at bit 7 of byte 0, 16 bits long, needs 2 bytes.
        let ok = "BO_ 1 A: 2 E\n SG_ X : 7|16@0+ (1,0) [0|1] \"\" R\n";
        assert!(parse_dbc(ok).is_ok());
        let bad = "BO_ 1 A: 1 E\n SG_ X : 7|16@0+ (1,0) [0|1] \"\" R\n";
        assert!(parse_dbc(bad).is_err());
    }

    #[test]
    fn skips_independent_signal_block() {
        let text = "BO_ 3221225472 VECTOR__INDEPENDENT_SIG_MSG: 0 Vector__XXX\n SG_ Orphan : 0|8@1+ (1,0) [0|0] \"\" Vector__XXX\n\nBO_ 5 A: 1 E\n";
        let db = parse_dbc(text).unwrap();
        assert_eq!(db.messages.len(), 1);
    }

    #[test]
    fn print_parse_round_trip() {
        let db = parse_dbc(FIG2).unwrap();
        let again = parse_dbc(&db.to_dbc_string()).unwrap();
        assert_eq!(db, again);
    }

    fn msg(aid: u16, bytes: &[u8]) -> CanMessage {
        CanMessage::new(0, aid, Payload::from_slice(bytes).unwrap())
    }

    #[test]
    fn selection_rules() {
        let text = "BO_ 16 A: 2 E\n SG_ Speed : 0|8@1+ (1,0) [0|255] \"\" R\n SG_ CRC_Sum2 : 8|8@1+ (1,0) [0|255] \"\" R\n\
                    BO_ 32 B: 2 E\n SG_ Const : 0|8@1+ (1,0) [0|255] \"\" R\n SG_ Fixed : 8|8@1+ (1,0) [3|3] \"\" R\n SG_ Moving : 8|4@1+ (1,0) [0|15] \"\" R\n";
        let db = parse_dbc(text).unwrap();
        let log = vec![msg(16, &[1, 9]), msg(32, &[7, 1]), msg(16, &[2, 9]), msg(32, &[7, 2])];
        let sel = select_signals(&db, &log, &["sum"]);
        assert_eq!(sel.names(), vec!["Speed", "Moving"]);
        assert_eq!(sel.included[1].index, 2);
        let reason = |n: &str| sel.excluded.iter().find(|e| e.name == n).unwrap().reason.clone();
        assert_eq!(reason("CRC_Sum2"), ExclusionReason::Keyword("sum".into()));
        assert_eq!(reason("Const"), ExclusionReason::Static);
        assert_eq!(reason("Fixed"), ExclusionReason::Static);
        assert!(sel.warnings.is_empty());
    }

    #[test]
    fn missing_aid_warns_and_keeps() {
        let db = parse_dbc("BO_ 16 A: 1 E\n SG_ S : 0|8@1+ (1,0) [0|255] \"\" R\nBO_ 17 B: 1 E\n SG_ T : 0|8@1+ (1,0) [0|255] \"\" R\n").unwrap();
        let sel = select_signals(&db, &[msg(16, &[1]), msg(16, &[2])], DEFAULT_KEYWORDS);
        assert_eq!(sel.names(), vec!["S", "T"]);
        assert_eq!(sel.warnings.len(), 1);
    }

    #[test]
    fn manifest_round_trip_and_hash() {
        let db = parse_dbc(FIG2).unwrap();
        let log = vec![
            msg(902, &[1, 0, 2, 0, 3, 0, 4, 0]),
            msg(902, &[5, 0x40, 6, 0, 7, 0, 8, 0]),
        ];
        let sel = select_signals(&db, &log, DEFAULT_KEYWORDS);
        assert_eq!(sel.len(), 4);
        let text = sel.to_manifest();
        let back = SignalSelection::from_manifest(&text).unwrap();
        assert_eq!(back.included, sel.included);
        assert_eq!(back.excluded, sel.excluded);
        assert_eq!(back.hash(), sel.hash());
        assert_eq!(select_signals(&db, &log, DEFAULT_KEYWORDS).to_manifest(), text);
    }
}
