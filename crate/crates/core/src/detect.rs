//! Thresholds, alarms and per-signal explanations.
//!
//! Signalwise losses are normalized by per-signal thresholds `θ` into error
//! rates `r`; a window raises an alarm when `max(r)` exceeds the global
//! threshold `Θ`, and `argmax(r)` names the signal to blame.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::canlog::{us_to_secs, CanMessage};
use crate::error::{Error, Result};
use crate::model::container::Container;
use crate::model::{signalwise_losses, LossVector, TrainedModel};
use crate::pipeline::{FeatureGenerator, FeatureLayout, FeatureWindow, PipelineParams};

/// Lower bound on `θ_i`, keeping `r` finite for perfectly reconstructed
/// signals.
pub const THETA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalThresholds {
    pub theta: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// `θ_i = mean_i + 3·σ_i` over the training losses, with population σ.
pub fn fit_signal_thresholds(losses: &[LossVector]) -> Result<SignalThresholds> {
    let first = losses
        .first()
        .ok_or_else(|| Error::param("no losses to fit thresholds on"))?;
    let x = first.0.len();
    if losses.iter().any(|l| l.0.len() != x) {
        return Err(Error::Shape("loss vectors differ in length".into()));
    }
    let n = losses.len() as f64;
    let mut mean = vec![0.0; x];
    for l in losses {
        for (m, v) in mean.iter_mut().zip(&l.0) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; x];
    for l in losses {
        for ((s, v), m) in var.iter_mut().zip(&l.0).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
    let theta = mean
        .iter()
        .zip(&std)
        .map(|(m, s)| (m + 3.0 * s).max(THETA_FLOOR))
        .collect();
    Ok(SignalThresholds { theta, mean, std })
}

/// `r_i = l_i / θ_i`.
pub fn error_rate(l: &LossVector, th: &SignalThresholds) -> Vec<f64> {
    l.0.iter().zip(&th.theta).map(|(l, t)| l / t).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionThreshold {
    pub value: f64,
    pub q: f64,
}

/// Nearest-rank percentile: the smallest sample with at least `q·n` samples
/// at or below it.
pub fn nearest_rank(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// `Θ` = nearest-rank `q`-th percentile of the per-window `max(r)`.
pub fn fit_detection_threshold(max_rates: &[f64], q: f64) -> Result<DetectionThreshold> {
    if !(0.95..=1.0).contains(&q) {
        return Err(Error::param(format!("q = {q} outside [0.95, 1]")));
    }
    let value = nearest_rank(max_rates, q).ok_or_else(|| Error::param("no validation windows"))?;
    Ok(DetectionThreshold { value, q })
}

fn max_of(r: &[f64]) -> f64 {
    r.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Per-signal and global thresholds tied to one feature selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub selection_hash: u64,
    pub thresholds: SignalThresholds,
    pub detection: DetectionThreshold,
}

impl Calibration {
    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let mut meta = serde_json::to_value(self).map_err(|e| Error::format(e.to_string()))?;
        meta["kind"] = "calibration".into();
        Container {
            meta,
            tensors: Vec::new(),
        }
        .write(out)
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let c = Container::read(input)?;
        if c.kind() != Some("calibration") {
            return Err(Error::format("container does not hold a calibration"));
        }
        let mut meta = c.meta;
        if let Some(m) = meta.as_object_mut() {
            m.remove("kind");
        }
        serde_json::from_value(meta).map_err(|e| Error::format(e.to_string()))
    }
}

/// Fits `θ` on training windows and `Θ` on validation windows.
pub fn calibrate(model: &TrainedModel, train: &[&Array2<f64>], val: &[&Array2<f64>], q: f64) -> Result<Calibration> {
    let thresholds = fit_signal_thresholds(&signalwise_losses(&model.model, train)?)?;
    let maxima: Vec<f64> = signalwise_losses(&model.model, val)?
        .iter()
        .map(|l| max_of(&error_rate(l, &thresholds)))
        .collect();
    Ok(Calibration {
        selection_hash: model.selection_hash,
        thresholds,
        detection: fit_detection_threshold(&maxima, q)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub window_end_us: u64,
    pub alarm: bool,
    pub r: Vec<f64>,
    pub max_rate: f64,
    /// Column of the largest rate (0-based; lowest index wins ties).
    pub argmax: usize,
    /// Columns with `r_i > Θ`, largest rate first.
    pub top_k: Vec<usize>,
    /// Columns clamped by the scaler somewhere in the window.
    pub violations: Vec<usize>,
}

/// Decision and explanation for one error-rate vector.
pub fn decide(r: Vec<f64>, big_theta: f64, window_end_us: u64, violations: &[bool]) -> DetectionResult {
    let mut argmax = 0;
    for (i, &v) in r.iter().enumerate() {
        if v > r[argmax] {
            argmax = i;
        }
    }
    let max_rate = r.get(argmax).copied().unwrap_or(f64::NEG_INFINITY);
    let mut top_k: Vec<usize> = (0..r.len()).filter(|&i| r[i] > big_theta).collect();
    top_k.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    DetectionResult {
        window_end_us,
        alarm: max_rate > big_theta,
        argmax,
        max_rate,
        top_k,
        violations: violations
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| i)
            .collect(),
        r,
    }
}

/// JSON-lines record of one result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub window_end_time: f64,
    pub alarm: bool,
    pub max_rate: f64,
    /// 1-based feature index.
    pub argmax_index: usize,
    pub argmax_name: String,
    pub topk: Vec<(String, f64)>,
    pub violations: Vec<String>,
}

impl DetectionResult {
    pub fn record(&self, names: &[String]) -> ReportRecord {
        ReportRecord {
            window_end_time: us_to_secs(self.window_end_us),
            alarm: self.alarm,
            max_rate: self.max_rate,
            argmax_index: self.argmax + 1,
            argmax_name: names[self.argmax].clone(),
            topk: self.top_k.iter().map(|&i| (names[i].clone(), self.r[i])).collect(),
            violations: self.violations.iter().map(|&i| names[i].clone()).collect(),
        }
    }

    pub fn to_json_line(&self, names: &[String]) -> String {
        serde_json::to_string(&self.record(names)).expect("records serialize")
    }
}

/// A trained model, its calibration and the signal names.
#[derive(Debug, Clone)]
pub struct Detector {
    pub model: TrainedModel,
    pub calibration: Calibration,
    pub names: Vec<String>,
}

impl Detector {
    pub fn new(model: TrainedModel, calibration: Calibration, names: Vec<String>) -> Result<Self> {
        if model.selection_hash != calibration.selection_hash {
            return Err(Error::param(format!(
                "calibration selection {:016x} does not match model selection {:016x}",
                calibration.selection_hash, model.selection_hash
            )));
        }
        let x = model.model.shape().1;
        if calibration.thresholds.theta.len() != x || names.len() != x {
            return Err(Error::Shape(format!(
                "model has {x} signals, calibration {} and names {}",
                calibration.thresholds.theta.len(),
                names.len()
            )));
        }
        Ok(Detector {
            model,
            calibration,
            names,
        })
    }

    pub fn big_theta(&self) -> f64 {
        self.calibration.detection.value
    }

    pub fn evaluate_window(&self, w: &FeatureWindow) -> Result<DetectionResult> {
        Ok(self.evaluate_batch(std::slice::from_ref(w))?.remove(0))
    }

    /// Scores many windows; results keep input order.
    pub fn evaluate_batch(&self, windows: &[FeatureWindow]) -> Result<Vec<DetectionResult>> {
        let data: Vec<&Array2<f64>> = windows.iter().map(|w| &w.data).collect();
        let losses = signalwise_losses(&self.model.model, &data)?;
        Ok(windows
            .iter()
            .zip(&losses)
            .map(|(w, l)| {
                decide(
                    error_rate(l, &self.calibration.thresholds),
                    self.big_theta(),
                    w.end_time_us,
                    &w.violations,
                )
            })
            .collect())
    }

    /// `r` over time with the alarm band, one row per result.
    pub fn heatmap_csv(&self, results: &[DetectionResult]) -> String {
        let mut out = String::from("window_end_time,theta_big,alarm");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for res in results {
            let _ = write!(
                out,
                "{:.6},{},{}",
                us_to_secs(res.window_end_us),
                self.big_theta(),
                res.alarm as u8
            );
            for v in &res.r {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Batch completion model: a window waiting for `z` more windows at tick
/// interval `t`, feature time `t_alpha` and per-sample inference `t_beta`.
pub fn latency_model(t: f64, t_alpha: f64, t_beta: f64, b: usize, z: usize) -> f64 {
    z as f64 * t + t_alpha + b as f64 * t_beta
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedResult {
    pub result: DetectionResult,
    /// Time spent waiting for the batch to fill, in microseconds.
    pub wait_us: f64,
    /// Wait plus measured batch inference time, in microseconds.
    pub latency_us: f64,
}

/// Offline batcher. Windows are grouped into batches of `b` in order; a
/// window's wait is the stream time until the last window of its batch
/// arrives.
pub fn run_detector(det: &Detector, windows: &[FeatureWindow], b: usize) -> Result<Vec<TimedResult>> {
    if b == 0 {
        return Err(Error::param("batch size must be at least 1"));
    }
    let mut out = Vec::with_capacity(windows.len());
    for batch in windows.chunks(b) {
        let started = Instant::now();
        let results = det.evaluate_batch(batch)?;
        let compute = started.elapsed().as_secs_f64() * 1e6;
        let last = batch.last().expect("chunks are nonempty").end_time_us;
        for (w, result) in batch.iter().zip(results) {
            let wait_us = (last - w.end_time_us) as f64;
            out.push(TimedResult {
                result,
                wait_us,
                latency_us: wait_us + compute,
            });
        }
    }
    Ok(out)
}

/// Settings of the two-thread streaming detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamConfig {
    pub batch: usize,
    /// Pace ticks against the wall clock using message timestamps.
    pub realtime: bool,
    /// Windows the producer may run ahead of the consumer.
    pub queue: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            batch: 8,
            realtime: false,
            queue: 1024,
        }
    }
}

/// Timing summary of a streaming run, all in microseconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamTiming {
    /// End-to-end latency per window, from its tick to its result.
    pub latencies_us: Vec<f64>,
    /// Mean time from a tick to its finished window.
    pub t_alpha_us: f64,
    /// Mean inference time per sample.
    pub t_beta_us: f64,
    pub windows: usize,
    pub batches: usize,
}

impl StreamTiming {
    /// Latency percentile with linear interpolation between order statistics.
    pub fn percentile(&self, p: f64) -> Option<f64> {
        percentile_interp(&self.latencies_us, p)
    }
}

/// Percentile `p ∈ [0, 1]` with linear interpolation (`p = 0.5` is the
/// usual median).
pub fn percentile_interp(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

struct Tick {
    window: FeatureWindow,
    due: Instant,
}

/// Streaming detection over a message source.
///
/// A producer thread turns messages into windows (sleeping until each tick's
/// wall-clock instant when `realtime` is set) and hands them over a bounded
/// queue; the calling thread batches them, runs inference and passes each
/// result with its end-to-end latency to `sink` in window order. A trailing
/// partial batch is flushed when the source ends.
pub fn stream_detect<I, F>(
    messages: I,
    layout: Arc<FeatureLayout>,
    params: PipelineParams,
    det: &Detector,
    cfg: StreamConfig,
    mut sink: F,
) -> Result<StreamTiming>
where
    I: Iterator<Item = Result<CanMessage>> + Send,
    F: FnMut(&DetectionResult, f64) -> Result<()>,
{
    if cfg.batch == 0 {
        return Err(Error::param("batch size must be at least 1"));
    }
    let (tx, rx) = mpsc::sync_channel::<Tick>(cfg.queue.max(1));
    std::thread::scope(|scope| {
        let producer = scope.spawn(move || -> Result<(Duration, usize)> {
            let mut gen = FeatureGenerator::new(layout, params);
            let wall0 = Instant::now();
            let mut origin = None;
            let mut feature_total = Duration::ZERO;
            let mut produced = 0usize;
            let mut fire = |gen: &mut FeatureGenerator, tick_us: u64, origin: u64| -> Result<bool> {
                let due = if cfg.realtime {
                    let due = wall0 + Duration::from_micros(tick_us - origin);
                    if let Some(d) = due.checked_duration_since(Instant::now()) {
                        std::thread::sleep(d);
                    }
                    due
                } else {
                    Instant::now()
                };
                if let Some(window) = gen.tick_window()? {
                    feature_total += due.elapsed();
                    produced += 1;
                    if tx.send(Tick { window, due }).is_err() {
                        return Ok(false);
                    }
                }
                Ok(true)
            };
            let mut last_ts = None;
            for m in messages {
                let m = m?;
                let o = *origin.get_or_insert(m.timestamp_us);
                while let Some(t) = gen.next_tick_us() {
                    if t >= m.timestamp_us {
                        break;
                    }
                    if !fire(&mut gen, t, o)? {
                        return Ok((feature_total, produced));
                    }
                }
                gen.apply(&m, false);
                last_ts = Some(m.timestamp_us);
            }
            if let (Some(last), Some(o)) = (last_ts, origin) {
                while let Some(t) = gen.next_tick_us() {
                    if t > last || !fire(&mut gen, t, o)? {
                        break;
                    }
                }
            }
            Ok((feature_total, produced))
        });

        let mut timing = StreamTiming::default();
        let mut infer_total = Duration::ZERO;
        let mut pending: Vec<Tick> = Vec::with_capacity(cfg.batch);
        let mut flush = |pending: &mut Vec<Tick>, timing: &mut StreamTiming| -> Result<()> {
            if pending.is_empty() {
                return Ok(());
            }
            let windows: Vec<FeatureWindow> = pending.iter().map(|p| p.window.clone()).collect();
            let started = Instant::now();
            let results = det.evaluate_batch(&windows)?;
            let done = Instant::now();
            infer_total += done - started;
            timing.batches += 1;
            for (p, r) in pending.iter().zip(&results) {
                let latency = (done - p.due).as_secs_f64() * 1e6;
                timing.latencies_us.push(latency);
                sink(r, latency)?;
            }
            timing.windows += pending.len();
            pending.clear();
            Ok(())
        };
        let mut consumer_result = Ok(());
        for tick in rx.iter() {
            pending.push(tick);
            if pending.len() == cfg.batch {
                if let Err(e) = flush(&mut pending, &mut timing) {
                    consumer_result = Err(e);
                    break;
                }
            }
        }
        if consumer_result.is_ok() {
            consumer_result = flush(&mut pending, &mut timing);
        }
        // Dropping the receiver unblocks a producer stuck on a full queue.
        drop(rx);
        let (feature_total, produced) = producer.join().map_err(|_| Error::param("feature thread panicked"))??;
        consumer_result?;
        if produced > 0 {
            timing.t_alpha_us = feature_total.as_secs_f64() * 1e6 / produced as f64;
        }
        if timing.windows > 0 {
            timing.t_beta_us = infer_total.as_secs_f64() * 1e6 / timing.windows as f64;
        }
        Ok(timing)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn lv(v: &[f64]) -> LossVector {
        LossVector(v.to_vec())
    }

    #[test]
    fn theta_examples() {
        let t = fit_signal_thresholds(&[lv(&[1.0, 0.0]), lv(&[1.0, 2.0])]).unwrap();
        assert_eq!(t.theta, vec![1.0, 4.0]);
        assert_eq!(t.std, vec![0.0, 1.0]);
        let zero = fit_signal_thresholds(&[lv(&[0.0]), lv(&[0.0])]).unwrap();
        assert_eq!(zero.theta, vec![THETA_FLOOR]);
        assert!(fit_signal_thresholds(&[]).is_err());
    }

    #[test]
    fn theta_tail_fraction_matches_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(5.0, 1.0).unwrap();
        let losses: Vec<LossVector> = (0..1_000_000).map(|_| lv(&[normal.sample(&mut rng)])).collect();
        let t = fit_signal_thresholds(&losses).unwrap();
        let above = losses.iter().filter(|l| l.0[0] > t.theta[0]).count() as f64 / losses.len() as f64;
        assert!((above - 0.00135).abs() < 0.0005, "{above}");
    }

    #[test]
    fn rate_examples() {
        let th = SignalThresholds {
            theta: vec![1.0, 2.0],
            mean: vec![0.0; 2],
            std: vec![0.0; 2],
        };
        assert_eq!(error_rate(&lv(&[1.0, 2.0]), &th), vec![1.0, 1.0]);
        assert_eq!(error_rate(&lv(&[2.0, 0.0]), &th), vec![2.0, 0.0]);
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(fit_detection_threshold(&v, 0.95).unwrap().value, 95.0);
        assert_eq!(fit_detection_threshold(&v, 1.0).unwrap().value, 100.0);
        assert_eq!(fit_detection_threshold(&[3.5; 7], 0.97).unwrap().value, 3.5);
        assert!(fit_detection_threshold(&v, 0.9).is_err());
        assert!(fit_detection_threshold(&[], 0.99).is_err());
    }

    #[test]
    fn decisions() {
        let r = decide(vec![0.5, 30.0, 2.0], 28.2, 0, &[false; 3]);
        assert!(r.alarm);
        assert_eq!(r.argmax, 1);
        assert_eq!(r.top_k, vec![1]);
        let quiet = decide(vec![0.5, 3.0, 2.0], 28.2, 0, &[false, true, false]);
        assert!(!quiet.alarm && quiet.top_k.is_empty());
        assert_eq!(quiet.violations, vec![1]);
        let many = decide(vec![40.0, 30.0, 50.0, 50.0], 28.2, 0, &[false; 4]);
        assert_eq!(many.top_k, vec![2, 3, 0, 1]);
        assert_eq!(many.argmax, 2);
        // max equal to the threshold does not alarm.
        assert!(!decide(vec![28.2], 28.2, 0, &[false]).alarm);
    }

    #[test]
    fn latency_examples() {
        assert!((latency_model(5.0, 4.8, 4.1814, 8, 0) - 38.2512).abs() < 1e-9);
        assert!((latency_model(5.0, 4.8, 4.1814, 8, 7) - 73.2512).abs() < 1e-9);
        assert_eq!(latency_model(5.0, 0.0, 2.5, 1, 0), 2.5);
    }

    #[test]
    fn interpolated_median() {
        assert_eq!(percentile_interp(&[4.0, 1.0, 3.0, 2.0], 0.5), Some(2.5));
        assert_eq!(percentile_interp(&[7.0], 0.99), Some(7.0));
        assert_eq!(percentile_interp(&[], 0.5), None);
    }

    #[test]
    fn calibration_round_trip() {
        let c = Calibration {
            selection_hash: 0xDEAD_BEEF_0123_4567,
            thresholds: SignalThresholds {
                theta: vec![0.1 + 0.2, 1e-9],
                mean: vec![1.0 / 3.0, 0.0],
                std: vec![0.7, 0.0],
            },
            detection: DetectionThreshold { value: 28.2, q: 0.993 },
        };
        let mut buf = Vec::new();
        c.save(&mut buf).unwrap();
        assert_eq!(Calibration::load(buf.as_slice()).unwrap(), c);
    }
}
