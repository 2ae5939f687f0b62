use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};

use canids::attack::{self, AttackKind};
use canids::canlog::{self, secs_to_us, CanMessage};
use canids::dbc::{self, ByteOrder, CanDatabase, SignalSelection};
use canids::detect::{self, Calibration, DetectionResult, Detector, ReportRecord, StreamConfig};
use canids::eval::{self, LatencySummary};
use canids::model::{Autoencoder, ModelConfig, TrainedModel};
use canids::pipeline::{self, FeatureDump, FeatureLayout, FeatureWindow, Label, PipelineParams, RangeMode};
use canids::synth::{self, SynthProfile};

use crate::config::RunConfig;
use crate::fail::{Context, Failure};
use crate::*;

// ---------------------------------------------------------------------------
// I/O helpers

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).at(path)
}

fn read_db(path: &Path) -> Result<CanDatabase, Failure> {
    dbc::parse_dbc(&read_text(path)?).at(path)
}

fn read_log(path: &Path) -> Result<Vec<CanMessage>, Failure> {
    let file = File::open(path).at(path)?;
    canlog::read_log(BufReader::new(file))
        .collect::<canids::Result<Vec<_>>>()
        .at(path)
}

fn read_selection(path: &Path) -> Result<SignalSelection, Failure> {
    SignalSelection::from_manifest(&read_text(path)?).at(path)
}

fn read_dump(path: &Path) -> Result<FeatureDump, Failure> {
    FeatureDump::read_binary(BufReader::new(File::open(path).at(path)?)).at(path)
}

fn read_model(path: &Path) -> Result<TrainedModel, Failure> {
    TrainedModel::load(BufReader::new(File::open(path).at(path)?)).at(path)
}

fn read_calibration(path: &Path) -> Result<Calibration, Failure> {
    Calibration::load(BufReader::new(File::open(path).at(path)?)).at(path)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path).at(path)?))
}

/// Writes `text` to `path`, or to stdout without one.
fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).at(p),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::data(format!("stdout: {e}"))),
    }
}

fn layout(db: &CanDatabase, sel: &SignalSelection) -> Result<Arc<FeatureLayout>, Failure> {
    Ok(Arc::new(FeatureLayout::new(db, sel)?))
}

/// DBC, selection and layout from flags or config paths.
fn load_layout(
    cfg: &RunConfig,
    dbc: &Option<PathBuf>,
    selection: &Option<PathBuf>,
) -> Result<(CanDatabase, Arc<FeatureLayout>), Failure> {
    let db = read_db(&RunConfig::path(dbc, &cfg.paths.dbc, "dbc")?)?;
    let sel = read_selection(&RunConfig::path(selection, &cfg.paths.selection, "selection")?)?;
    let layout = layout(&db, &sel)?;
    Ok((db, layout))
}

/// Model, calibration and layout checked against each other.
fn load_detector(
    cfg: &RunConfig,
    model: &Option<PathBuf>,
    calibration: &Option<PathBuf>,
    dbc: &Option<PathBuf>,
    selection: &Option<PathBuf>,
) -> Result<(CanDatabase, Arc<FeatureLayout>, PipelineParams, Detector), Failure> {
    let (db, layout) = load_layout(cfg, dbc, selection)?;
    let trained = read_model(&RunConfig::path(model, &cfg.paths.model, "model")?)?;
    let calib = read_calibration(&RunConfig::path(calibration, &cfg.paths.calibration, "calibration")?)?;
    if trained.selection_hash != layout.selection_hash() {
        return Err(Failure::data(format!(
            "model was trained on selection {:016x}, manifest is {:016x}",
            trained.selection_hash,
            layout.selection_hash()
        )));
    }
    let (w, _) = trained.model.shape();
    let params = PipelineParams::new(trained.t_us as f64 / 1e6, w, RangeMode::Clamp)?;
    let det = Detector::new(trained, calib, layout.names().to_vec())?;
    Ok((db, layout, params, det))
}

fn order_name(o: ByteOrder) -> &'static str {
    match o {
        ByteOrder::LittleEndian => "little",
        ByteOrder::BigEndian => "big",
    }
}

// ---------------------------------------------------------------------------
// Data inspection

pub fn parse_dbc(cfg: &RunConfig, a: &ParseDbcArgs) -> Result<(), Failure> {
    let path = RunConfig::path(&a.dbc, &cfg.paths.dbc, "dbc")?;
    let db = read_db(&path)?;
    info!(
        "{}: {} messages, {} signals",
        path.display(),
        db.messages.len(),
        db.signal_count()
    );
    if let Some(p) = &a.canonical {
        fs::write(p, db.to_dbc_string()).at(p)?;
    }
    let mut out =
        String::from("aid,message,sender,dlc,signal,start_bit,length,byte_order,signed,scale,offset,min,max,unit\n");
    for m in db.messages.values() {
        for s in &m.signals {
            let _ = writeln!(
                out,
                "{:03X},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                m.aid,
                m.name,
                m.sender,
                m.dlc,
                s.name,
                s.start_bit,
                s.bit_length,
                order_name(s.byte_order),
                s.is_signed() as u8,
                s.scale,
                s.offset,
                s.min_phys,
                s.max_phys,
                s.unit
            );
        }
    }
    if a.canonical.is_none() || a.out.is_some() {
        emit(a.out.as_deref(), &out)?;
    }
    Ok(())
}

pub fn stats(cfg: &RunConfig, a: &StatsArgs) -> Result<(), Failure> {
    let log = read_log(&a.log)?;
    let db = match a.dbc.as_ref().or(cfg.paths.dbc.as_ref()) {
        Some(p) => Some(read_db(p)?),
        None => None,
    };
    let mut out = String::from("aid,name,sender,count,mean_dt_ms,std_dt_ms,dlc,signals,unique_payloads\n");
    for s in canlog::stream_stats(&log, db.as_ref()) {
        let _ = writeln!(
            out,
            "{:03X},{},{},{},{},{:.4},{},{},{}",
            s.aid,
            s.name.as_deref().unwrap_or(""),
            s.sender.as_deref().unwrap_or(""),
            s.count,
            s.mean_dt.map(|d| format!("{:.4}", d * 1e3)).unwrap_or_default(),
            s.std_dt * 1e3,
            s.dlc,
            s.signal_count.map(|n| n.to_string()).unwrap_or_default(),
            s.unique_payloads
        );
    }
    emit(a.out.as_deref(), &out)
}

pub fn hamming(a: &HammingArgs) -> Result<(), Failure> {
    let log = read_log(&a.log)?;
    let summary = canlog::hamming_all(&log);
    for (aid, why) in &summary.skipped {
        warn!("aid {aid:03X} skipped: {why}");
    }
    let mut out = String::new();
    if a.summary {
        out.push_str("aid,sum_d,flipped_bits\n");
        for p in &summary.profiles {
            let _ = writeln!(out, "{:03X},{:.6},{}", p.aid, p.sum(), p.flipped_bits());
        }
    } else {
        out.push_str("aid,bit,d\n");
        for p in &summary.profiles {
            for (bit, d) in p.d.iter().enumerate() {
                let _ = writeln!(out, "{:03X},{bit},{d:.6}", p.aid);
            }
        }
    }
    info!(
        "total sum of d over {} streams: {:.4}",
        summary.profiles.len(),
        summary.total()
    );
    emit(a.out.as_deref(), &out)
}

pub fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let profile = match &a.profile {
        Some(p) => SynthProfile::from_toml(&read_text(p)?).at(p)?,
        None if a.stationary => SynthProfile::stationary(a.duration, a.seed),
        None => SynthProfile::driving(a.duration, a.seed),
    };
    let out = synth::generate(&profile)?;
    canlog::write_log(create(&a.out_log)?, &out.log).at(&a.out_log)?;
    if let Some(p) = &a.out_dbc {
        fs::write(p, out.db.to_dbc_string()).at(p)?;
    }
    if let Some(p) = &a.segments {
        let mut csv = String::from("start_s,end_s,kind\n");
        for s in &out.segments {
            let _ = writeln!(csv, "{:.3},{:.3},{}", s.start_s, s.end_s, s.kind);
        }
        fs::write(p, csv).at(p)?;
    }
    info!("{} messages over {} s", out.log.len(), profile.duration_s);
    Ok(())
}

// ---------------------------------------------------------------------------
// Training phase

pub fn select(cfg: &RunConfig, a: &SelectArgs) -> Result<(), Failure> {
    let db = read_db(&RunConfig::path(&a.dbc, &cfg.paths.dbc, "dbc")?)?;
    let log = read_log(&a.log)?;
    let words: Vec<&str> = match &a.keywords {
        Some(k) => k.iter().map(String::as_str).collect(),
        None => dbc::DEFAULT_KEYWORDS.to_vec(),
    };
    let sel = dbc::select_signals(&db, &log, &words);
    for w in &sel.warnings {
        warn!("{w}");
    }
    if sel.is_empty() {
        return Err(Failure::data("no signal survived selection"));
    }
    info!("{} signals selected, {} excluded", sel.len(), sel.excluded.len());
    let out = a.out.as_ref().or(cfg.paths.selection.as_ref());
    emit(out.map(PathBuf::as_path), &sel.to_manifest())
}

pub fn features(cfg: &RunConfig, a: &FeaturesArgs) -> Result<(), Failure> {
    let (_, layout) = load_layout(cfg, &a.dbc, &a.selection)?;
    let mode = if a.clamp { RangeMode::Clamp } else { RangeMode::Strict };
    let params = PipelineParams::new(cfg.t(a.t)?, cfg.w(a.w)?, mode)?;
    let mut dump = FeatureDump::new(params.t_us, params.w, layout.width(), layout.selection_hash());
    for path in &a.log {
        let log = read_log(path)?;
        let ticks = pipeline::run_ticks(&log, None, layout.clone(), params).at(path)?;
        info!("{}: {} ticks", path.display(), ticks.len());
        dump.push_segment(ticks)?;
    }
    let mut out = create(&a.out)?;
    dump.write_binary(&mut out).at(&a.out)?;
    out.flush().at(&a.out)?;
    if let Some(p) = &a.csv {
        fs::write(p, dump.to_csv(layout.names())).at(p)?;
    }
    info!("{} windows of {}x{}", dump.windows().len(), params.w, layout.width());
    Ok(())
}

/// Training and validation windows from two compatible dumps.
fn dump_pair(train: &Path, val: &Path) -> Result<(FeatureDump, Vec<FeatureWindow>, Vec<FeatureWindow>), Failure> {
    let a = read_dump(train)?;
    let b = read_dump(val)?;
    if (a.t_us, a.w, a.x, a.selection_hash) != (b.t_us, b.w, b.x, b.selection_hash) {
        return Err(Failure::data(format!(
            "{} and {} were built with different t, w or selection",
            train.display(),
            val.display()
        )));
    }
    let (tw, vw) = (a.windows(), b.windows());
    if tw.is_empty() || vw.is_empty() {
        return Err(Failure::data("feature dumps hold fewer ticks than one window"));
    }
    Ok((a, tw, vw))
}

pub fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<(), Failure> {
    if a.stride == 0 {
        return Err(Failure::usage("stride must be at least 1"));
    }
    let (dump, train_w, val_w) = dump_pair(&a.features, &a.val)?;
    let mc: ModelConfig = cfg.model.resolve(&a.overrides(), dump.x);
    mc.validate(dump.w, dump.x).map_err(|e| Failure::usage(e.to_string()))?;
    let train_set: Vec<_> = train_w.iter().step_by(a.stride).map(|w| &w.data).collect();
    let val_set: Vec<_> = val_w.iter().map(|w| &w.data).collect();
    info!(
        "training {:?} on {} windows, validating on {}",
        mc.layer_family,
        train_set.len(),
        val_set.len()
    );
    let trained = canids::model::train(&train_set, &val_set, &mc, dump.selection_hash, dump.t_us)?;
    info!(
        "best epoch {} of {}, validation mse {:.6e}",
        trained.best_epoch,
        trained.history.len(),
        trained.best_val_mse().unwrap_or(f64::NAN)
    );
    let out = RunConfig::path(&a.out, &cfg.paths.model, "out")?;
    let mut f = create(&out)?;
    trained.save(&mut f).at(&out)?;
    f.flush().at(&out)?;
    if let Some(p) = &a.history {
        fs::write(p, trained.history_csv()).at(p)?;
    }
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, a: &CalibrateArgs) -> Result<(), Failure> {
    let q = cfg.q(a.q)?;
    let trained = read_model(&RunConfig::path(&a.model, &cfg.paths.model, "model")?)?;
    let (dump, train_w, val_w) = dump_pair(&a.features, &a.val)?;
    if dump.selection_hash != trained.selection_hash || dump.t_us != trained.t_us {
        return Err(Failure::data("feature dumps do not match the model's selection or t"));
    }
    let train_set: Vec<_> = train_w.iter().map(|w| &w.data).collect();
    let val_set: Vec<_> = val_w.iter().map(|w| &w.data).collect();
    let calib = detect::calibrate(&trained, &train_set, &val_set, q)?;
    info!("detection threshold {} at q = {q}", calib.detection.value);
    let out = RunConfig::path(&a.out, &cfg.paths.calibration, "out")?;
    let mut f = create(&out)?;
    calib.save(&mut f).at(&out)?;
    f.flush().at(&out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference phase

pub fn attack(cfg: &RunConfig, a: &AttackArgs) -> Result<(), Failure> {
    let log = read_log(&a.log)?;
    let plans =
        attack::parse_plans(&read_text(&a.plan)?).map_err(|e| Failure::usage(format!("{}: {e}", a.plan.display())))?;
    let plan = match (a.index, plans.len()) {
        (Some(i), n) if i < n => &plans[i],
        (Some(i), n) => return Err(Failure::usage(format!("--index {i} but the campaign has {n} plans"))),
        (None, 1) => &plans[0],
        (None, n) => {
            return Err(Failure::usage(format!(
                "campaign holds {n} plans; pick one with --index"
            )))
        }
    };
    let db = match a.dbc.as_ref().or(cfg.paths.dbc.as_ref()) {
        Some(p) => Some(read_db(p)?),
        None => None,
    };
    let attacked = attack::apply_plan(&log, plan, db.as_ref())?;
    info!("{}: {} injected messages", plan.summary(), attacked.injected_count());
    if let AttackKind::Fuzzing { rate, .. } = plan.attack {
        info!(
            "bus load {:.1}% of benign",
            attack::relative_bus_load(attack::bus_rate(&log), rate)
        );
    }
    canlog::write_log(create(&a.out)?, &attacked.messages).at(&a.out)?;

    if let Some(labels) = &a.labels {
        let (_, layout) = load_layout(cfg, &a.dbc, &a.selection)?;
        let params = PipelineParams::new(cfg.t(a.t)?, cfg.w(a.w)?, RangeMode::Clamp)?;
        let mut windows = pipeline::run_pipeline(&attacked.messages, Some(&attacked.injected), layout, params)?;
        let suspension = matches!(plan.attack, AttackKind::Suspension { .. });
        attack::label_windows(&mut windows, attacked.period_us, params.t_us, suspension);
        fs::write(labels, attack::format_labels(&windows)).at(labels)?;
    }
    Ok(())
}

pub fn detect(cfg: &RunConfig, a: &DetectArgs) -> Result<(), Failure> {
    let (_, layout, params, det) = load_detector(cfg, &a.model, &a.calibration, &a.dbc, &a.selection)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let names = det.names.clone();

    if a.stream {
        let stream_cfg = StreamConfig {
            batch: cfg.batch(a.batch)?,
            realtime: a.realtime,
            ..StreamConfig::default()
        };
        let input = canlog::read_log(BufReader::new(io::stdin()));
        let mut alarms = 0usize;
        let timing = detect::stream_detect(input, layout, params, &det, stream_cfg, |r, _| {
            alarms += r.alarm as usize;
            writeln!(out, "{}", r.to_json_line(&names))?;
            out.flush()?;
            Ok(())
        })?;
        info!(
            "{} windows in {} batches, {alarms} alarms",
            timing.windows, timing.batches
        );
        if let Some(l) = LatencySummary::from_us(&timing.latencies_us) {
            info!(
                "latency p50 {:.3} ms, p95 {:.3} ms, p99 {:.3} ms; t_alpha {:.3} ms, t_beta {:.3} ms",
                l.p50,
                l.p95,
                l.p99,
                timing.t_alpha_us / 1e3,
                timing.t_beta_us / 1e3
            );
        }
        return Ok(());
    }

    let path = a
        .log
        .as_ref()
        .ok_or_else(|| Failure::usage("detect needs --log or --stream"))?;
    let log = read_log(path)?;
    let windows = pipeline::run_pipeline(&log, None, layout, params).at(path)?;
    let results = det.evaluate_batch(&windows)?;
    let mut buf = String::new();
    for r in &results {
        buf.push_str(&r.to_json_line(&names));
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Failure::data(format!("writing detections: {e}")))?;
    info!(
        "{} windows, {} alarms",
        results.len(),
        results.iter().filter(|r| r.alarm).count()
    );
    if let Some(p) = &a.heatmap {
        fs::write(p, det.heatmap_csv(&results)).at(p)?;
    }
    Ok(())
}

/// Rebuilds the parts of a result that scoring needs from a report line.
fn result_of(rec: &ReportRecord) -> DetectionResult {
    DetectionResult {
        window_end_us: secs_to_us(rec.window_end_time),
        alarm: rec.alarm,
        r: Vec::new(),
        max_rate: rec.max_rate,
        argmax: rec.argmax_index.saturating_sub(1),
        top_k: Vec::new(),
        violations: Vec::new(),
    }
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<(), Failure> {
    let out = a.out.as_ref().or(cfg.paths.reports.as_ref()).map(PathBuf::as_path);
    if let Some(path) = &a.detections {
        let labels_path = a.labels.as_ref().expect("clap requires --labels");
        let results = read_text(path)?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<ReportRecord>(l)
                    .map(|r| result_of(&r))
                    .map_err(|e| Failure::data(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let labels: Vec<(u64, Label)> = attack::parse_labels(&read_text(labels_path)?)
            .at(labels_path)?
            .into_iter()
            .map(|(t, l)| (secs_to_us(t), l))
            .collect();
        let report = eval::score(&results, &labels, &a.name, "detections")?;
        return emit(out, &(report.to_json() + "\n"));
    }

    let (Some(log_path), Some(plan_path)) = (&a.log, &a.plan) else {
        return Err(Failure::usage(
            "eval needs --detections with --labels, or --log with --plan",
        ));
    };
    let (db, layout, params, det) = load_detector(cfg, &a.model, &a.calibration, &a.dbc, &a.selection)?;
    let log = read_log(log_path)?;
    let plans = attack::parse_plans(&read_text(plan_path)?)
        .map_err(|e| Failure::usage(format!("{}: {e}", plan_path.display())))?;
    let reports = eval::run_campaign(&log, &plans, &db, layout, params, &det)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.to_json());
        text.push('\n');
    }
    if let Some(p) = &a.table {
        fs::write(p, eval::campaign_table(&reports)).at(p)?;
    }
    emit(out, &text)
}

pub fn bench(a: &BenchArgs) -> Result<(), Failure> {
    let model = match &a.model {
        Some(p) => read_model(p)?.model,
        None => Autoencoder::new(ModelConfig::for_family(a.layer, a.x), a.w, a.x)
            .map_err(|e| Failure::usage(e.to_string()))?,
    };
    if a.batch.contains(&0) {
        return Err(Failure::usage("batch sizes must be at least 1"));
    }
    let rows = eval::bench_throughput(&model, &a.batch, a.runs, a.min_ms, a.seed)?;
    emit(a.out.as_deref(), &eval::throughput_table(&rows))
}
