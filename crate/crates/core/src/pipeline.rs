//! Feature generation: latest-payload cache, fixed-rate sampler, range
//! scaler, and sliding windows.
//!
//! Ticks start at the first message timestamp and repeat every `t`. A tick at
//! time `T` observes every message with timestamp `≤ T`. Sampling only starts
//! once every monitored stream has been seen at least once.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::Array2;

use crate::canlog::{CanMessage, Payload};
use crate::dbc::{CanDatabase, SignalSelection, SignalSpec};
use crate::deserialize;
use crate::error::{Error, Result};

/// Maximum payload bits per cache row (classic CAN).
pub const ROW_BITS: usize = 64;

#[derive(Debug, Clone)]
struct RowLayout {
    aid: u16,
    /// (signal spec, feature column)
    signals: Vec<(SignalSpec, usize)>,
}

/// Compiled mapping from cache rows to feature columns.
#[derive(Debug, Clone)]
pub struct FeatureLayout {
    rows: Vec<RowLayout>,
    row_of_aid: Vec<Option<u32>>,
    names: Vec<String>,
    ranges: Vec<(f64, f64)>,
    selection_hash: u64,
}

impl FeatureLayout {
    pub fn new(db: &CanDatabase, selection: &SignalSelection) -> Result<Self> {
        let mut rows: Vec<RowLayout> = Vec::new();
        let mut row_of_aid = vec![None; 0x800];
        let mut names = Vec::with_capacity(selection.len());
        let mut ranges = Vec::with_capacity(selection.len());
        for (col, sel) in selection.included.iter().enumerate() {
            let msg = db.message(sel.aid).ok_or(Error::UnknownAid(sel.aid))?;
            let spec = msg.signal(&sel.name).ok_or_else(|| {
                Error::InvalidDatabase(format!("selected signal {} not in aid {:03X}", sel.name, sel.aid))
            })?;
            if spec.has_static_range() {
                return Err(Error::InvalidDatabase(format!(
                    "selected signal {} has an empty range",
                    sel.name
                )));
            }
            let row = match row_of_aid[sel.aid as usize] {
                Some(r) => r as usize,
                None => {
                    rows.push(RowLayout {
                        aid: sel.aid,
                        signals: Vec::new(),
                    });
                    row_of_aid[sel.aid as usize] = Some(rows.len() as u32 - 1);
                    rows.len() - 1
                }
            };
            rows[row].signals.push((spec.clone(), col));
            names.push(spec.name.clone());
            ranges.push((spec.min_phys, spec.max_phys));
        }
        Ok(FeatureLayout {
            rows,
            row_of_aid,
            names,
            ranges,
            selection_hash: selection.hash(),
        })
    }

    /// Number of features `x`.
    pub fn width(&self) -> usize {
        self.names.len()
    }

    /// Number of monitored streams `N`.
    pub fn streams(&self) -> usize {
        self.rows.len()
    }

    pub fn aids(&self) -> Vec<u16> {
        self.rows.iter().map(|r| r.aid).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn selection_hash(&self) -> u64 {
        self.selection_hash
    }

    pub fn row(&self, aid: u16) -> Option<usize> {
        self.row_of_aid.get(aid as usize).copied().flatten().map(|r| r as usize)
    }

    /// Column range `[min, max]` for a feature.
    pub fn range(&self, col: usize) -> (f64, f64) {
        self.ranges[col]
    }
}

/// Min-max scaling against the declared physical range.
pub fn scale(value: f64, min: f64, max: f64) -> f64 {
    (value - min) / (max - min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeMode {
    /// Out-of-range values are errors (training data preparation).
    Strict,
    /// Out-of-range values are clamped and flagged (inference).
    Clamp,
}

/// Latest payload of every monitored stream.
#[derive(Debug, Clone)]
pub struct PayloadCache {
    rows: Vec<Option<Payload>>,
    injected: Vec<bool>,
    filled: usize,
    ignored: u64,
}

impl PayloadCache {
    pub fn new(streams: usize) -> Self {
        PayloadCache {
            rows: vec![None; streams],
            injected: vec![false; streams],
            filled: 0,
            ignored: 0,
        }
    }

    /// Stores `msg` as the latest payload of its stream. Messages for
    /// unmonitored AIDs only bump the ignored counter.
    pub fn update(&mut self, layout: &FeatureLayout, msg: &CanMessage) {
        self.update_flagged(layout, msg, false)
    }

    /// As [`update`](Self::update), remembering whether the payload came
    /// from an attacker.
    pub fn update_flagged(&mut self, layout: &FeatureLayout, msg: &CanMessage, injected: bool) {
        match layout.row(msg.aid) {
            Some(r) => {
                if self.rows[r].is_none() {
                    self.filled += 1;
                }
                self.rows[r] = Some(msg.payload);
                self.injected[r] = injected;
            }
            None => self.ignored += 1,
        }
    }

    pub fn is_ready(&self) -> bool {
        self.filled == self.rows.len()
    }

    pub fn filled_rows(&self) -> usize {
        self.filled
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn row(&self, r: usize) -> Option<&Payload> {
        self.rows[r].as_ref()
    }

    /// Whether any row currently holds an injected payload.
    pub fn any_injected(&self) -> bool {
        self.injected.iter().any(|&b| b)
    }
}

/// One scaled sample `ŝ` taken at a tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledVector {
    pub time_us: u64,
    pub values: Vec<f64>,
    pub violations: Vec<bool>,
    /// An injected payload was resident in the cache at this tick.
    pub injected: bool,
}

impl ScaledVector {
    pub fn any_violation(&self) -> bool {
        self.violations.iter().any(|&v| v)
    }
}

/// Snapshots the cache and scales every selected signal into `[0, 1]`.
/// Returns `Ok(None)` while some stream has not been observed.
pub fn sample(
    cache: &PayloadCache,
    layout: &FeatureLayout,
    now_us: u64,
    mode: RangeMode,
) -> Result<Option<ScaledVector>> {
    if !cache.is_ready() {
        return Ok(None);
    }
    let x = layout.width();
    let mut values = vec![0.0; x];
    let mut violations = vec![false; x];
    for (r, row) in layout.rows.iter().enumerate() {
        let payload = cache.rows[r].as_ref().expect("ready cache has every row");
        for (spec, col) in &row.signals {
            let (first, last) = spec.linear_span();
            let fits = last < payload.bit_len();
            let v = deserialize::decode_lenient(payload, spec);
            let ok = fits && deserialize::in_range(v, spec);
            if !ok && mode == RangeMode::Strict {
                return Err(if fits {
                    Error::RangeViolation {
                        aid: row.aid,
                        signal: spec.name.clone(),
                        value: v,
                        min: spec.min_phys,
                        max: spec.max_phys,
                    }
                } else {
                    Error::WindowOutOfRange {
                        signal: spec.name.clone(),
                        first,
                        last,
                        available: payload.bit_len(),
                    }
                });
            }
            values[*col] = scale(v, spec.min_phys, spec.max_phys).clamp(0.0, 1.0);
            violations[*col] = !ok;
        }
    }
    Ok(Some(ScaledVector {
        time_us: now_us,
        values,
        violations,
        injected: cache.any_injected(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Label {
    #[default]
    Unlabeled,
    Benign,
    Attack,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Unlabeled => "unlabeled",
            Label::Benign => "benign",
            Label::Attack => "attack",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unlabeled" => Some(Label::Unlabeled),
            "benign" => Some(Label::Benign),
            "attack" => Some(Label::Attack),
            _ => None,
        }
    }
}

/// The `w × x` model input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    /// Rows are ticks, oldest first; columns are signals.
    pub data: Array2<f64>,
    pub end_time_us: u64,
    pub label: Label,
    /// Some tick in the window observed an injected payload.
    pub injected: bool,
    /// Per signal: some tick in the window was clamped.
    pub violations: Vec<bool>,
}

impl FeatureWindow {
    pub fn from_ticks(ticks: &[ScaledVector]) -> Self {
        let w = ticks.len();
        let x = ticks.first().map_or(0, |t| t.values.len());
        let mut data = Array2::zeros((w, x));
        let mut violations = vec![false; x];
        for (j, t) in ticks.iter().enumerate() {
            for (i, &v) in t.values.iter().enumerate() {
                data[[j, i]] = v;
                violations[i] |= t.violations[i];
            }
        }
        FeatureWindow {
            data,
            end_time_us: ticks.last().map_or(0, |t| t.time_us),
            label: Label::Unlabeled,
            injected: ticks.iter().any(|t| t.injected),
            violations,
        }
    }

    pub fn w(&self) -> usize {
        self.data.nrows()
    }

    pub fn x(&self) -> usize {
        self.data.ncols()
    }

    pub fn end_time(&self) -> f64 {
        crate::canlog::us_to_secs(self.end_time_us)
    }
}

/// Sliding window over scaled vectors with a stride of one tick.
#[derive(Debug, Clone)]
pub struct WindowBuilder {
    w: usize,
    buf: VecDeque<ScaledVector>,
}

impl WindowBuilder {
    pub fn new(w: usize) -> Self {
        WindowBuilder {
            w: w.max(1),
            buf: VecDeque::with_capacity(w + 1),
        }
    }

    /// Returns a window of the latest `w` vectors once enough have arrived.
    pub fn push(&mut self, v: ScaledVector) -> Option<FeatureWindow> {
        if self.buf.len() == self.w {
            self.buf.pop_front();
        }
        self.buf.push_back(v);
        if self.buf.len() < self.w {
            return None;
        }
        let ticks = self.buf.make_contiguous();
        Some(FeatureWindow::from_ticks(ticks))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineParams {
    /// Sampling interval in microseconds.
    pub t_us: u64,
    pub w: usize,
    pub mode: RangeMode,
}

impl PipelineParams {
    pub fn new(t_secs: f64, w: usize, mode: RangeMode) -> Result<Self> {
        if !(t_secs > 0.0) {
            return Err(Error::param("t must be positive"));
        }
        let t_us = crate::canlog::secs_to_us(t_secs);
        if t_us == 0 {
            return Err(Error::param("t must be at least one microsecond"));
        }
        if w == 0 {
            return Err(Error::param("w must be at least 1"));
        }
        Ok(PipelineParams { t_us, w, mode })
    }
}

/// Stateful feature generator: message cache plus tick clock.
///
/// Drive it with [`apply`](Self::apply) for each message and
/// [`fire_tick`](Self::fire_tick) whenever the clock reaches
/// [`next_tick_us`](Self::next_tick_us).
#[derive(Debug)]
pub struct FeatureGenerator {
    layout: Arc<FeatureLayout>,
    params: PipelineParams,
    cache: PayloadCache,
    builder: WindowBuilder,
    next_tick: Option<u64>,
}

impl FeatureGenerator {
    pub fn new(layout: Arc<FeatureLayout>, params: PipelineParams) -> Self {
        FeatureGenerator {
            cache: PayloadCache::new(layout.streams()),
            builder: WindowBuilder::new(params.w),
            layout,
            params,
            next_tick: None,
        }
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn cache(&self) -> &PayloadCache {
        &self.cache
    }

    /// Time of the next pending tick; `None` before the first message.
    pub fn next_tick_us(&self) -> Option<u64> {
        self.next_tick
    }

    pub fn apply(&mut self, msg: &CanMessage, injected: bool) {
        if self.next_tick.is_none() {
            self.next_tick = Some(msg.timestamp_us);
        }
        self.cache.update_flagged(&self.layout, msg, injected);
    }

    /// Samples at the pending tick and advances the clock by `t`.
    /// Returns the scaled vector (once ready) for callers that record ticks.
    pub fn fire_tick(&mut self) -> Result<Option<ScaledVector>> {
        let Some(now) = self.next_tick else {
            return Ok(None);
        };
        self.next_tick = Some(now + self.params.t_us);
        sample(&self.cache, &self.layout, now, self.params.mode)
    }

    /// Fires the pending tick and pushes the sample into the window.
    pub fn tick_window(&mut self) -> Result<Option<FeatureWindow>> {
        Ok(self.fire_tick()?.and_then(|v| self.builder.push(v)))
    }
}

/// Replays `log` and returns every post-warm-up scaled tick.
///
/// `injected`, when given, flags attacker messages (same length as `log`).
pub fn run_ticks(
    log: &[CanMessage],
    injected: Option<&[bool]>,
    layout: Arc<FeatureLayout>,
    params: PipelineParams,
) -> Result<Vec<ScaledVector>> {
    if let Some(f) = injected {
        if f.len() != log.len() {
            return Err(Error::Shape("injected flags must match log length".into()));
        }
    }
    let mut gen = FeatureGenerator::new(layout, params);
    let mut out = Vec::new();
    for (k, m) in log.iter().enumerate() {
        while let Some(t) = gen.next_tick_us() {
            if t >= m.timestamp_us {
                break;
            }
            if let Some(v) = gen.fire_tick()? {
                out.push(v);
            }
        }
        gen.apply(m, injected.is_some_and(|f| f[k]));
    }
    if let Some(last) = log.last() {
        while let Some(t) = gen.next_tick_us() {
            if t > last.timestamp_us {
                break;
            }
            if let Some(v) = gen.fire_tick()? {
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// Every window of `w` consecutive ticks, stride one.
pub fn windows_from_ticks(ticks: &[ScaledVector], w: usize) -> Vec<FeatureWindow> {
    if w == 0 || ticks.len() < w {
        return Vec::new();
    }
    ticks.windows(w).map(FeatureWindow::from_ticks).collect()
}

/// Full offline feature generation for one log.
pub fn run_pipeline(
    log: &[CanMessage],
    injected: Option<&[bool]>,
    layout: Arc<FeatureLayout>,
    params: PipelineParams,
) -> Result<Vec<FeatureWindow>> {
    let ticks = run_ticks(log, injected, layout, params)?;
    Ok(windows_from_ticks(&ticks, params.w))
}

// ---------------------------------------------------------------------------
// Feature dumps

const DUMP_MAGIC: &[u8; 4] = b"XCFT";
const DUMP_VERSION: u16 = 1;

/// Scaled tick series from one or more logs, plus the shape header.
///
/// Windows never span two segments.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub t_us: u64,
    pub w: usize,
    pub x: usize,
    pub selection_hash: u64,
    pub segments: Vec<Vec<ScaledVector>>,
}

impl FeatureDump {
    pub fn new(t_us: u64, w: usize, x: usize, selection_hash: u64) -> Self {
        FeatureDump {
            t_us,
            w,
            x,
            selection_hash,
            segments: Vec::new(),
        }
    }

    pub fn push_segment(&mut self, ticks: Vec<ScaledVector>) -> Result<()> {
        if let Some(bad) = ticks.iter().find(|t| t.values.len() != self.x) {
            return Err(Error::Shape(format!(
                "tick has {} values, dump expects {}",
                bad.values.len(),
                self.x
            )));
        }
        self.segments.push(ticks);
        Ok(())
    }

    pub fn windows(&self) -> Vec<FeatureWindow> {
        self.segments
            .iter()
            .flat_map(|s| windows_from_ticks(s, self.w))
            .collect()
    }

    pub fn tick_count(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&DUMP_VERSION.to_le_bytes())?;
        out.write_all(&self.t_us.to_le_bytes())?;
        out.write_all(&(self.w as u32).to_le_bytes())?;
        out.write_all(&(self.x as u32).to_le_bytes())?;
        out.write_all(&self.selection_hash.to_le_bytes())?;
        out.write_all(&(self.segments.len() as u32).to_le_bytes())?;
        let vbytes = self.x.div_ceil(8);
        for seg in &self.segments {
            out.write_all(&(seg.len() as u64).to_le_bytes())?;
            for t in seg {
                out.write_all(&t.time_us.to_le_bytes())?;
                out.write_all(&[t.injected as u8])?;
                let mut bits = vec![0u8; vbytes];
                for (i, &v) in t.violations.iter().enumerate() {
                    if v {
                        bits[i / 8] |= 1 << (i % 8);
                    }
                }
                out.write_all(&bits)?;
                for v in &t.values {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)?;
            Ok(b)
        }
        if &take::<4, _>(&mut input)? != DUMP_MAGIC {
            return Err(Error::format("not a feature dump (bad magic)"));
        }
        let version = u16::from_le_bytes(take(&mut input)?);
        if version != DUMP_VERSION {
            return Err(Error::format(format!("unsupported feature dump version {version}")));
        }
        let t_us = u64::from_le_bytes(take(&mut input)?);
        let w = u32::from_le_bytes(take(&mut input)?) as usize;
        let x = u32::from_le_bytes(take(&mut input)?) as usize;
        let selection_hash = u64::from_le_bytes(take(&mut input)?);
        let nseg = u32::from_le_bytes(take(&mut input)?);
        let vbytes = x.div_ceil(8);
        let mut dump = FeatureDump::new(t_us, w, x, selection_hash);
        for _ in 0..nseg {
            let n = u64::from_le_bytes(take(&mut input)?) as usize;
            let mut seg = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let time_us = u64::from_le_bytes(take(&mut input)?);
                let [flags] = take::<1, _>(&mut input)?;
                let mut bits = vec![0u8; vbytes];
                input.read_exact(&mut bits)?;
                let mut values = Vec::with_capacity(x);
                for _ in 0..x {
                    values.push(f64::from_le_bytes(take(&mut input)?));
                }
                seg.push(ScaledVector {
                    time_us,
                    values,
                    violations: (0..x).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect(),
                    injected: flags & 1 != 0,
                });
            }
            dump.segments.push(seg);
        }
        Ok(dump)
    }

    /// One row per tick, one column per signal.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = format!(
            "# t_us={},w={},x={},selection={:016x}\nsegment,time",
            self.t_us, self.w, self.x, self.selection_hash
        );
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (s, seg) in self.segments.iter().enumerate() {
            for t in seg {
                let _ = write!(out, "{s},{}.{:06}", t.time_us / 1_000_000, t.time_us % 1_000_000);
                for v in &t.values {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbc::{parse_dbc, select_signals};

    const DB: &str =
        "BO_ 16 A: 1 E\n SG_ S : 0|8@1+ (1,0) [0|100] \"\" R\nBO_ 32 B: 1 E\n SG_ T : 0|8@1+ (1,0) [0|200] \"\" R\n";

    fn setup() -> (CanDatabase, Arc<FeatureLayout>) {
        let db = parse_dbc(DB).unwrap();
        let log = vec![msg(0, 16, 1), msg(0, 32, 1), msg(1, 16, 2), msg(1, 32, 2)];
        let sel = select_signals(&db, &log, &[]);
        let layout = Arc::new(FeatureLayout::new(&db, &sel).unwrap());
        (db, layout)
    }

    fn msg(t: u64, aid: u16, b: u8) -> CanMessage {
        CanMessage::new(t, aid, Payload::from_slice(&[b]).unwrap())
    }

    #[test]
    fn cache_semantics() {
        let (_, layout) = setup();
        let mut c = PayloadCache::new(layout.streams());
        c.update(&layout, &msg(0, 16, 1));
        assert_eq!(c.filled_rows(), 1);
        c.update(&layout, &msg(1, 16, 9));
        assert_eq!(c.row(0).unwrap().as_bytes(), &[9]);
        assert_eq!(c.filled_rows(), 1);
        c.update(&layout, &msg(2, 99, 9));
        assert_eq!(c.ignored(), 1);
        assert_eq!(c.filled_rows(), 1);
    }

    #[test]
    fn sampler_waits_for_every_stream() {
        let (_, layout) = setup();
        let mut c = PayloadCache::new(layout.streams());
        c.update(&layout, &msg(0, 16, 1));
        assert!(sample(&c, &layout, 0, RangeMode::Clamp).unwrap().is_none());
        c.update(&layout, &msg(0, 32, 200));
        let v = sample(&c, &layout, 0, RangeMode::Clamp).unwrap().unwrap();
        assert_eq!(v.values, vec![0.01, 1.0]);
    }

    #[test]
    fn scaler_endpoints() {
        assert_eq!(scale(0.0, 0.0, 100.0), 0.0);
        assert_eq!(scale(100.0, 0.0, 100.0), 1.0);
        assert_eq!(scale(50.0, 0.0, 100.0), 0.5);
    }

    #[test]
    fn out_of_range_clamps_or_errors() {
        let (_, layout) = setup();
        let mut c = PayloadCache::new(layout.streams());
        c.update(&layout, &msg(0, 16, 250));
        c.update(&layout, &msg(0, 32, 0));
        let v = sample(&c, &layout, 0, RangeMode::Clamp).unwrap().unwrap();
        assert_eq!(v.values[0], 1.0);
        assert_eq!(v.violations, vec![true, false]);
        assert!(matches!(
            sample(&c, &layout, 0, RangeMode::Strict),
            Err(Error::RangeViolation { aid: 16, .. })
        ));
    }

    #[test]
    fn sliding_windows() {
        let mut b = WindowBuilder::new(3);
        let v = |k: u64| ScaledVector {
            time_us: k,
            values: vec![k as f64 / 10.0],
            violations: vec![false],
            injected: false,
        };
        assert!(b.push(v(1)).is_none());
        assert!(b.push(v(2)).is_none());
        let w = b.push(v(3)).unwrap();
        assert_eq!(w.data.column(0).to_vec(), vec![0.1, 0.2, 0.3]);
        let w = b.push(v(4)).unwrap();
        assert_eq!(w.data.column(0).to_vec(), vec![0.2, 0.3, 0.4]);
        assert_eq!(w.end_time_us, 4);
    }

    #[test]
    fn tick_alignment_and_warmup_count() {
        let (_, layout) = setup();
        // Streams first seen at 0 and 2500 us; ticks every 1000 us from 0.
        let mut log = Vec::new();
        for k in 0..20u64 {
            log.push(msg(k * 1000, 16, (k % 50) as u8));
            log.push(msg(k * 1000 + 2500, 32, 3));
        }
        log.sort_by_key(|m| m.timestamp_us);
        let params = PipelineParams::new(0.001, 4, RangeMode::Strict).unwrap();
        let ticks = run_ticks(&log, None, layout.clone(), params).unwrap();
        // First ready tick is 3000; last tick is the final timestamp 21500 -> 21000.
        assert_eq!(ticks.first().unwrap().time_us, 3000);
        assert_eq!(ticks.last().unwrap().time_us, 21000);
        assert_eq!(ticks.len(), 19);
        let windows = run_pipeline(&log, None, layout, params).unwrap();
        assert_eq!(windows.len(), ticks.len() - 4 + 1);
        // The tick at 3000 sees the message stamped exactly 3000.
        assert_eq!(ticks[0].values[0], 3.0 / 100.0);
    }

    #[test]
    fn doubling_t_halves_rate() {
        let (_, layout) = setup();
        let log: Vec<_> = (0..4001u64)
            .flat_map(|k| [msg(k * 500, 16, 1), msg(k * 500 + 1, 32, 1)])
            .collect();
        let a = run_pipeline(
            &log,
            None,
            layout.clone(),
            PipelineParams::new(0.001, 1, RangeMode::Clamp).unwrap(),
        )
        .unwrap();
        let b = run_pipeline(
            &log,
            None,
            layout,
            PipelineParams::new(0.002, 1, RangeMode::Clamp).unwrap(),
        )
        .unwrap();
        assert_eq!(a.len(), 2000);
        assert_eq!(b.len(), 1000);
    }

    #[test]
    fn injected_residency_tracks_cache() {
        let (_, layout) = setup();
        let log = vec![msg(0, 16, 1), msg(0, 32, 1), msg(1500, 16, 2), msg(2500, 16, 3)];
        let flags = vec![false, false, true, false];
        let params = PipelineParams::new(0.001, 1, RangeMode::Clamp).unwrap();
        let ticks = run_ticks(&log, Some(&flags), layout, params).unwrap();
        let inj: Vec<bool> = ticks.iter().map(|t| t.injected).collect();
        assert_eq!(inj, vec![false, false, true]);
    }

    #[test]
    fn dump_round_trip() {
        let (_, layout) = setup();
        let log: Vec<_> = (0..50u64)
            .flat_map(|k| [msg(k * 1000, 16, k as u8), msg(k * 1000, 32, 7)])
            .collect();
        let params = PipelineParams::new(0.001, 5, RangeMode::Strict).unwrap();
        let ticks = run_ticks(&log, None, layout.clone(), params).unwrap();
        let mut dump = FeatureDump::new(params.t_us, 5, layout.width(), layout.selection_hash());
        dump.push_segment(ticks.clone()).unwrap();
        dump.push_segment(ticks[..7].to_vec()).unwrap();
        let mut buf = Vec::new();
        dump.write_binary(&mut buf).unwrap();
        let back = FeatureDump::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back, dump);
        assert_eq!(back.windows().len(), (ticks.len() - 4) + 3);
        let csv = dump.to_csv(layout.names());
        assert!(csv.starts_with("# t_us=1000,w=5,x=2,"));
        assert_eq!(csv.lines().count(), 2 + ticks.len() + 7);
    }
}
