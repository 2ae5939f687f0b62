//! Attack injection on benign logs.
//!
//! Each transform returns a [`LabeledLog`]: the merged, time-ordered message
//! sequence plus a flag per message marking attacker traffic. Attack periods
//! are given in seconds relative to the first message of the input log and
//! are half-open, `[start, end)`. Traffic outside the period is untouched.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canlog::{secs_to_us, us_to_secs, CanMessage, Payload};
use crate::dbc::CanDatabase;
use crate::deserialize::write_signal;
use crate::error::{Error, Result};
use crate::pipeline::{FeatureWindow, Label};

/// Gap between a benign message and its fabricated twin.
pub const FABRICATION_DELAY_US: u64 = 100;

/// How attacker payloads are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum PayloadGen {
    /// Fixed bytes.
    Constant { hex: String },
    /// Uniformly random bytes, same length as the benign payload.
    Random,
    /// Benign payload passed through unchanged.
    Identity,
    /// Benign payload with named signals forced to fixed physical values.
    Override { values: BTreeMap<String, f64> },
    /// Benign payload with one signal swept linearly across the period.
    Ramp { signal: String, from: f64, to: f64 },
}

impl PayloadGen {
    pub fn set(signal: &str, value: f64) -> Self {
        PayloadGen::Override {
            values: BTreeMap::from([(signal.to_string(), value)]),
        }
    }

    /// Checks signal names and constant payloads against the target stream.
    fn validate(&self, db: Option<&CanDatabase>, aid: u16) -> Result<()> {
        let names: Vec<&String> = match self {
            PayloadGen::Constant { hex } => {
                Payload::from_hex(hex).ok_or_else(|| Error::param(format!("bad payload hex '{hex}'")))?;
                return Ok(());
            }
            PayloadGen::Random | PayloadGen::Identity => return Ok(()),
            PayloadGen::Override { values } => values.keys().collect(),
            PayloadGen::Ramp { signal, .. } => vec![signal],
        };
        let db = db.ok_or_else(|| Error::param("signal-level payloads need a database"))?;
        let spec = db.message(aid).ok_or(Error::UnknownAid(aid))?;
        for n in names {
            if spec.signal(n).is_none() {
                return Err(Error::param(format!("aid {aid:03X} has no signal {n}")));
            }
        }
        Ok(())
    }

    /// Attacker payload derived from the benign one at relative progress
    /// `frac` through the attack period.
    fn make(
        &self,
        benign: &Payload,
        aid: u16,
        frac: f64,
        db: Option<&CanDatabase>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Payload> {
        let signal_spec = |name: &str| {
            db.and_then(|d| d.message(aid))
                .and_then(|m| m.signal(name))
                .ok_or_else(|| Error::param(format!("aid {aid:03X} has no signal {name}")))
        };
        match self {
            PayloadGen::Constant { hex } => Payload::from_hex(hex).ok_or_else(|| Error::param("bad payload hex")),
            PayloadGen::Random => {
                let mut b = [0u8; 8];
                rng.fill(&mut b[..benign.len()]);
                Ok(Payload::new(b, benign.len()))
            }
            PayloadGen::Identity => Ok(*benign),
            PayloadGen::Override { values } => {
                let mut p = *benign;
                for (name, &v) in values {
                    write_signal(&mut p, signal_spec(name)?, aid, v)?;
                }
                Ok(p)
            }
            PayloadGen::Ramp { signal, from, to } => {
                let mut p = *benign;
                write_signal(&mut p, signal_spec(signal)?, aid, from + (to - from) * frac)?;
                Ok(p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackKind {
    Fuzzing {
        /// Injected messages per second.
        rate: f64,
        /// AIDs to draw from; empty means those observed in the log.
        #[serde(default)]
        aid_pool: Vec<u16>,
        /// Draw AIDs uniformly from the whole 11-bit space instead.
        #[serde(default)]
        random_aids: bool,
    },
    Fabrication {
        aid: u16,
        payload: PayloadGen,
    },
    Suspension {
        aid: u16,
    },
    Masquerade {
        aid: u16,
        payload: PayloadGen,
    },
    Replay {
        capture_start: f64,
        capture_end: f64,
    },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fuzzing { .. } => "fuzzing",
            AttackKind::Fabrication { .. } => "fabrication",
            AttackKind::Suspension { .. } => "suspension",
            AttackKind::Masquerade { .. } => "masquerade",
            AttackKind::Replay { .. } => "replay",
        }
    }

    pub fn target(&self) -> Option<u16> {
        match *self {
            AttackKind::Fabrication { aid, .. }
            | AttackKind::Suspension { aid }
            | AttackKind::Masquerade { aid, .. } => Some(aid),
            _ => None,
        }
    }
}

/// One attack experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    #[serde(default)]
    pub name: String,
    /// Seconds after the first log message.
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub attack: AttackKind,
}

impl AttackPlan {
    pub fn new(attack: AttackKind, start: f64, end: f64, seed: u64) -> Self {
        AttackPlan {
            name: String::new(),
            start,
            end,
            seed,
            attack,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::param(format!("attack plan: {}", e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plans serialize")
    }

    /// `name` if set, else `kind@target` or `kind`.
    pub fn label(&self) -> String {
        if !self.name.is_empty() {
            return self.name.clone();
        }
        match self.attack.target() {
            Some(aid) => format!("{}@{aid:03X}", self.attack.name()),
            None => self.attack.name().to_string(),
        }
    }

    pub fn summary(&self) -> String {
        format!("{} [{}, {}) s", self.label(), self.start, self.end)
    }
}

/// A list of plans, as read from a campaign file with `[[plan]]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    #[serde(default)]
    pub plan: Vec<AttackPlan>,
}

impl Campaign {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::param(format!("campaign: {}", e.message())))
    }
}

/// Reads either a single plan or a campaign.
pub fn parse_plans(text: &str) -> Result<Vec<AttackPlan>> {
    let c = Campaign::from_toml(text)?;
    if !c.plan.is_empty() {
        return Ok(c.plan);
    }
    AttackPlan::from_toml(text).map(|p| vec![p])
}

/// Output of an attack transform.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLog {
    pub messages: Vec<CanMessage>,
    pub injected: Vec<bool>,
    /// Absolute attack period in microseconds, `[start, end)`.
    pub period_us: (u64, u64),
}

impl LabeledLog {
    pub fn injected_count(&self) -> usize {
        self.injected.iter().filter(|&&f| f).count()
    }
}

fn absolute_period(log: &[CanMessage], start: f64, end: f64) -> Result<(u64, u64)> {
    let first = log.first().ok_or_else(|| Error::param("empty log"))?;
    let last = log.last().expect("nonempty");
    if !(start >= 0.0 && start < end) {
        return Err(Error::param(format!(
            "attack period [{start}, {end}) is empty or negative"
        )));
    }
    let (a, b) = (
        first.timestamp_us + secs_to_us(start),
        first.timestamp_us + secs_to_us(end),
    );
    if a > last.timestamp_us {
        return Err(Error::param(format!(
            "attack start {start} s is past the end of the log"
        )));
    }
    Ok((a, b))
}

fn require_aid(log: &[CanMessage], aid: u16) -> Result<()> {
    if log.iter().any(|m| m.aid == aid) {
        Ok(())
    } else {
        Err(Error::UnknownAid(aid))
    }
}

/// Merges time-sorted benign and injected messages; on equal timestamps the
/// benign message comes first.
fn merge(benign: &[CanMessage], mut injected: Vec<CanMessage>, period_us: (u64, u64)) -> LabeledLog {
    injected.sort_by_key(|m| m.timestamp_us);
    let mut messages = Vec::with_capacity(benign.len() + injected.len());
    let mut flags = Vec::with_capacity(benign.len() + injected.len());
    let mut inj = injected.into_iter().peekable();
    for m in benign {
        while let Some(i) = inj.next_if(|i| i.timestamp_us < m.timestamp_us) {
            messages.push(i);
            flags.push(true);
        }
        messages.push(*m);
        flags.push(false);
    }
    for i in inj {
        messages.push(i);
        flags.push(true);
    }
    LabeledLog {
        messages,
        injected: flags,
        period_us,
    }
}

/// Inserts `round(rate · duration)` messages at uniform random times with
/// random 8-byte payloads and AIDs drawn from `aid_pool`.
pub fn fuzz(log: &[CanMessage], start: f64, end: f64, rate: f64, aid_pool: &[u16], seed: u64) -> Result<LabeledLog> {
    let period = absolute_period(log, start, end)?;
    if !(rate > 0.0) {
        return Err(Error::param("fuzzing rate must be positive"));
    }
    if aid_pool.is_empty() {
        return Err(Error::param("empty fuzzing AID pool"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (rate * (end - start)).round() as usize;
    let injected = (0..n)
        .map(|_| {
            let t = rng.random_range(period.0..period.1);
            let aid = *aid_pool.choose(&mut rng).expect("nonempty pool");
            let bytes: [u8; 8] = rng.random();
            CanMessage::new(t, aid, Payload::new(bytes, 8))
        })
        .collect();
    Ok(merge(log, injected, period))
}

/// Distinct AIDs in the log, ascending.
pub fn observed_aids(log: &[CanMessage]) -> Vec<u16> {
    let mut aids: Vec<u16> = log.iter().map(|m| m.aid).collect();
    aids.sort_unstable();
    aids.dedup();
    aids
}

fn progress(t: u64, period: (u64, u64)) -> f64 {
    (t - period.0) as f64 / (period.1 - period.0) as f64
}

/// Sends one crafted message right after every benign message of `aid`
/// inside the period. Benign messages whose twin would land at or past the
/// period end are left alone.
pub fn fabricate(
    log: &[CanMessage],
    start: f64,
    end: f64,
    aid: u16,
    payload: &PayloadGen,
    db: Option<&CanDatabase>,
    seed: u64,
) -> Result<LabeledLog> {
    let period = absolute_period(log, start, end)?;
    require_aid(log, aid)?;
    payload.validate(db, aid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut injected = Vec::new();
    for m in log.iter().filter(|m| m.aid == aid) {
        let t = m.timestamp_us + FABRICATION_DELAY_US;
        if m.timestamp_us >= period.0 && t < period.1 {
            let p = payload.make(&m.payload, aid, progress(m.timestamp_us, period), db, &mut rng)?;
            injected.push(CanMessage {
                timestamp_us: t,
                payload: p,
                ..*m
            });
        }
    }
    Ok(merge(log, injected, period))
}

/// Drops every message of `aid` inside the period.
pub fn suspend(log: &[CanMessage], start: f64, end: f64, aid: u16) -> Result<LabeledLog> {
    let period = absolute_period(log, start, end)?;
    require_aid(log, aid)?;
    let messages: Vec<CanMessage> = log
        .iter()
        .filter(|m| !(m.aid == aid && (period.0..period.1).contains(&m.timestamp_us)))
        .copied()
        .collect();
    Ok(LabeledLog {
        injected: vec![false; messages.len()],
        messages,
        period_us: period,
    })
}

/// Replaces the payloads of `aid` inside the period, keeping the timing.
pub fn masquerade(
    log: &[CanMessage],
    start: f64,
    end: f64,
    aid: u16,
    payload: &PayloadGen,
    db: Option<&CanDatabase>,
    seed: u64,
) -> Result<LabeledLog> {
    let period = absolute_period(log, start, end)?;
    require_aid(log, aid)?;
    payload.validate(db, aid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut messages = log.to_vec();
    let mut injected = vec![false; log.len()];
    for (m, flag) in messages.iter_mut().zip(&mut injected) {
        if m.aid == aid && (period.0..period.1).contains(&m.timestamp_us) {
            m.payload = payload.make(&m.payload, aid, progress(m.timestamp_us, period), db, &mut rng)?;
            *flag = true;
        }
    }
    Ok(LabeledLog {
        messages,
        injected,
        period_us: period,
    })
}

/// Re-sends the traffic captured in `[c0, c1)` back to back from the start
/// of the period, shifted in time, until the period ends.
pub fn replay(log: &[CanMessage], start: f64, end: f64, c0: f64, c1: f64) -> Result<LabeledLog> {
    let period = absolute_period(log, start, end)?;
    let origin = log[0].timestamp_us;
    if !(c0 >= 0.0 && c0 < c1) {
        return Err(Error::param(format!("capture window [{c0}, {c1}) is empty")));
    }
    let (a, b) = (origin + secs_to_us(c0), origin + secs_to_us(c1));
    let capture: Vec<&CanMessage> = log.iter().filter(|m| (a..b).contains(&m.timestamp_us)).collect();
    if capture.is_empty() {
        return Err(Error::param("capture window holds no messages"));
    }
    let span = b - a;
    let mut injected = Vec::new();
    'outer: for k in 0u64.. {
        for m in &capture {
            let t = period.0 + (m.timestamp_us - a) + k * span;
            if t >= period.1 {
                break 'outer;
            }
            injected.push(CanMessage { timestamp_us: t, ..**m });
        }
    }
    Ok(merge(log, injected, period))
}

/// Runs one plan against a benign log.
pub fn apply_plan(log: &[CanMessage], plan: &AttackPlan, db: Option<&CanDatabase>) -> Result<LabeledLog> {
    let (s, e) = (plan.start, plan.end);
    match &plan.attack {
        AttackKind::Fuzzing {
            rate,
            aid_pool,
            random_aids,
        } => {
            let pool: Vec<u16> = if *random_aids {
                (0..=crate::dbc::MAX_AID as u16).collect()
            } else if aid_pool.is_empty() {
                observed_aids(log)
            } else {
                aid_pool.clone()
            };
            fuzz(log, s, e, *rate, &pool, plan.seed)
        }
        AttackKind::Fabrication { aid, payload } => fabricate(log, s, e, *aid, payload, db, plan.seed),
        AttackKind::Suspension { aid } => suspend(log, s, e, *aid),
        AttackKind::Masquerade { aid, payload } => masquerade(log, s, e, *aid, payload, db, plan.seed),
        AttackKind::Replay {
            capture_start,
            capture_end,
        } => replay(log, s, e, *capture_start, *capture_end),
    }
}

/// Benign message rate in messages per second over the log span.
pub fn bus_rate(log: &[CanMessage]) -> f64 {
    match (log.first(), log.last()) {
        (Some(a), Some(b)) if b.timestamp_us > a.timestamp_us => {
            (log.len() - 1) as f64 / us_to_secs(b.timestamp_us - a.timestamp_us)
        }
        _ => 0.0,
    }
}

/// Bus load during fuzzing as a percentage of the benign rate.
pub fn relative_bus_load(base_rate: f64, injected_rate: f64) -> f64 {
    100.0 * (base_rate + injected_rate) / base_rate
}

/// Assigns ground truth: a window is an attack window when its time span
/// `[end − w·t, end]` meets the attack period and, unless the attack is a
/// suspension, some tick in it saw an injected payload in the cache.
/// Windows are otherwise benign.
pub fn label_windows(windows: &mut [FeatureWindow], period_us: (u64, u64), t_us: u64, suspension: bool) {
    for win in windows {
        let span_start = win.end_time_us.saturating_sub(win.w() as u64 * t_us);
        let overlaps = span_start < period_us.1 && win.end_time_us >= period_us.0;
        win.label = if overlaps && (suspension || win.injected) {
            Label::Attack
        } else {
            Label::Benign
        };
    }
}

/// Sidecar label file: `window_end_time,label` per line.
pub fn format_labels(windows: &[FeatureWindow]) -> String {
    let mut out = String::from("window_end_time,label\n");
    for w in windows {
        let _ = writeln!(out, "{:.6},{}", w.end_time(), w.label.as_str());
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Vec<(f64, Label)>> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Syntax {
                line: i + 1,
                msg: format!("bad label row '{line}'"),
            };
            let (t, l) = line.split_once(',').ok_or_else(bad)?;
            Ok((
                t.trim().parse().map_err(|_| bad())?,
                Label::parse(l.trim()).ok_or_else(bad)?,
            ))
        })
        .collect()
}
