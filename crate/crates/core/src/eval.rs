//! Scoring: confusion metrics, ROC/AUC, throughput and campaign tables.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_plan, label_windows, AttackKind, AttackPlan};
use crate::canlog::CanMessage;
use crate::dbc::CanDatabase;
use crate::detect::{percentile_interp, DetectionResult, Detector};
use crate::error::{Error, Result};
use crate::model::Autoencoder;
use crate::par;
use crate::pipeline::{run_pipeline, FeatureLayout, FeatureWindow, Label, PipelineParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    /// `(false positive rate, true positive rate)`, from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve swept over every distinct score, AUC by the trapezoid rule.
/// Tied scores form one step, which credits ties with one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::param("ROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let p = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        let prev = *points.last().expect("starts with origin");
        auc += (p.0 - prev.0) * (p.1 + prev.1) / 2.0;
        points.push(p);
    }
    Ok(Roc { points, auc })
}

/// Outcome of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub plan: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub windows: usize,
    pub attack_windows: usize,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the labels hold a single class.
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<LatencySummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

impl LatencySummary {
    pub fn from_us(latencies_us: &[f64]) -> Option<Self> {
        let p = |q| percentile_interp(latencies_us, q).map(|v| v / 1000.0);
        Some(LatencySummary {
            p50: p(0.5)?,
            p95: p(0.95)?,
            p99: p(0.99)?,
        })
    }
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }
}

/// Confusion metrics and AUC for results aligned with window labels.
/// Unlabeled windows are skipped.
pub fn score(results: &[DetectionResult], labels: &[(u64, Label)], plan: &str, kind: &str) -> Result<ExperimentReport> {
    if results.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} results but {} labels",
            results.len(),
            labels.len()
        )));
    }
    let mut pairs = Vec::with_capacity(results.len());
    let mut scores = Vec::with_capacity(results.len());
    for (r, &(t, label)) in results.iter().zip(labels) {
        if r.window_end_us != t {
            return Err(Error::Shape(format!(
                "result at {} us is aligned with a label at {t} us",
                r.window_end_us
            )));
        }
        let actual = match label {
            Label::Unlabeled => continue,
            Label::Attack => true,
            Label::Benign => false,
        };
        pairs.push((r.alarm, actual));
        scores.push(r.max_rate);
    }
    let confusion = Confusion::from_pairs(pairs.iter().copied());
    let actual: Vec<bool> = pairs.iter().map(|p| p.1).collect();
    Ok(ExperimentReport {
        plan: plan.to_string(),
        kind: kind.to_string(),
        target: None,
        windows: pairs.len(),
        attack_windows: confusion.tp + confusion.fn_,
        precision: confusion.precision(),
        recall: confusion.recall(),
        f1: confusion.f1(),
        confusion,
        auc: roc_auc(&scores, &actual).ok().map(|r| r.auc),
        latency_ms: None,
        throughput: None,
    })
}

/// Everything one experiment produced.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub report: ExperimentReport,
    pub windows: Vec<FeatureWindow>,
    pub results: Vec<DetectionResult>,
}

/// Applies `plan` to a benign log, builds labeled windows and scores the
/// detector on them.
pub fn run_experiment(
    benign: &[CanMessage],
    plan: &AttackPlan,
    db: &CanDatabase,
    layout: Arc<FeatureLayout>,
    params: PipelineParams,
    det: &Detector,
) -> Result<Experiment> {
    let attacked = apply_plan(benign, plan, Some(db))?;
    let mut windows = run_pipeline(&attacked.messages, Some(&attacked.injected), layout, params)?;
    let suspension = matches!(plan.attack, AttackKind::Suspension { .. });
    label_windows(&mut windows, attacked.period_us, params.t_us, suspension);
    let results = det.evaluate_batch(&windows)?;
    let labels: Vec<(u64, Label)> = windows.iter().map(|w| (w.end_time_us, w.label)).collect();
    let mut report = score(&results, &labels, &plan.label(), plan.attack.name())?;
    report.target = plan.attack.target().map(|a| format!("{a:03X}"));
    Ok(Experiment {
        report,
        windows,
        results,
    })
}

/// Runs every plan; reports come back in plan order.
pub fn run_campaign(
    benign: &[CanMessage],
    plans: &[AttackPlan],
    db: &CanDatabase,
    layout: Arc<FeatureLayout>,
    params: PipelineParams,
    det: &Detector,
) -> Result<Vec<ExperimentReport>> {
    par::map(plans, |p| {
        run_experiment(benign, p, db, layout.clone(), params, det).map(|e| e.report)
    })
    .into_iter()
    .collect()
}

/// Attack kind × target matrix as CSV.
pub fn campaign_table(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("plan,kind,target,windows,attack_windows,tp,fp,tn,fn,precision,recall,f1,auc\n");
    for r in reports {
        let c = &r.confusion;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{}",
            r.plan,
            r.kind,
            r.target.as_deref().unwrap_or("-"),
            r.windows,
            r.attack_windows,
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            r.precision,
            r.recall,
            r.f1,
            r.auc.map_or("-".to_string(), |a| format!("{a:.6}")),
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub batch: usize,
    pub samples_per_s: f64,
    pub ms_per_sample: f64,
}

/// Wall-clock inference throughput per batch size: median over `runs`
/// timed runs, each repeating the batch for at least `min_ms`.
pub fn bench_throughput(
    model: &Autoencoder,
    batch_sizes: &[usize],
    runs: usize,
    min_ms: f64,
    seed: u64,
) -> Result<Vec<ThroughputRow>> {
    let (w, x) = model.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &b in batch_sizes {
        if b == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        let windows: Vec<Array2<f64>> = (0..b)
            .map(|_| Array2::from_shape_fn((w, x), |_| rng.random()))
            .collect();
        let refs: Vec<&Array2<f64>> = windows.iter().collect();
        // Warm-up.
        model.reconstruct_batch(&refs)?;
        let mut per_sample = Vec::with_capacity(runs.max(1));
        for _ in 0..runs.max(1) {
            let started = Instant::now();
            let mut reps = 0usize;
            while reps == 0 || started.elapsed().as_secs_f64() * 1e3 < min_ms {
                model.reconstruct_batch(&refs)?;
                reps += 1;
            }
            per_sample.push(started.elapsed().as_secs_f64() / (reps * b) as f64);
        }
        let s = percentile_interp(&per_sample, 0.5).expect("at least one run");
        rows.push(ThroughputRow {
            batch: b,
            samples_per_s: 1.0 / s,
            ms_per_sample: s * 1e3,
        });
    }
    Ok(rows)
}

pub fn throughput_table(rows: &[ThroughputRow]) -> String {
    let mut out = String::from("batch,samples_per_s,ms_per_sample\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.4},{:.4}", r.batch, r.samples_per_s, r.ms_per_sample);
    }
    out
}
