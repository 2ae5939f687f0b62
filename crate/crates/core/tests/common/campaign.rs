//! Desk-scale end-to-end campaign on synthetic traffic.

use std::sync::Arc;
use std::time::Instant;

use canids::attack::{bus_rate, AttackKind, AttackPlan, PayloadGen};
use canids::canlog::CanMessage;
use canids::dbc::{select_signals, CanDatabase, DEFAULT_KEYWORDS};
use canids::detect::{calibrate, Detector};
use canids::eval::{run_experiment, Experiment};
use canids::model::{self, LayerFamily, ModelConfig, TrainedModel};
use canids::pipeline::{run_pipeline, FeatureLayout, FeatureWindow, PipelineParams, RangeMode};
use canids::synth::{self, SynthProfile, SPEED_AID, SPEED_SIGNAL, WHEEL_AID, WHEEL_SIGNALS};

pub const T_SECS: f64 = 0.01;
pub const W: usize = 32;
pub const Q: f64 = 0.99;

pub struct Setup {
    pub db: CanDatabase,
    pub layout: Arc<FeatureLayout>,
    pub params: PipelineParams,
    pub detector: Detector,
    pub val_windows: Vec<FeatureWindow>,
    pub test_log: Vec<CanMessage>,
    /// Attack period in seconds from the start of the test log.
    pub period: (f64, f64),
    pub train_seconds: f64,
    /// Benign windows (training, validation, test) checked for `[0, 1]`.
    pub benign_checked: usize,
    pub benign_in_unit: bool,
}

pub fn in_unit(windows: &[FeatureWindow]) -> bool {
    windows.iter().all(|w| w.data.iter().all(|v| (0.0..=1.0).contains(v)))
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        layer_family: LayerFamily::Dense,
        encoder: vec![128],
        latent_dim: 16,
        decoder: vec![128],
        learning_rate: 1e-3,
        max_epochs: 40,
        early_stop_patience: 5,
        seed: 7,
        batch_size_train: 64,
    }
}

pub fn build() -> Setup {
    let train = synth::generate(&SynthProfile::driving(400.0, 101)).unwrap();
    // Validation spans a whole drive cycle so every manoeuvre is calibrated.
    let val = synth::generate(&SynthProfile::driving(130.0, 202)).unwrap();
    let test = synth::generate(&SynthProfile::driving(200.0, 303)).unwrap();
    let db = train.db.clone();
    let sel = select_signals(&db, &train.log, DEFAULT_KEYWORDS);
    let layout = Arc::new(FeatureLayout::new(&db, &sel).unwrap());
    let params = PipelineParams::new(T_SECS, W, RangeMode::Clamp).unwrap();

    let train_windows = run_pipeline(&train.log, None, layout.clone(), params).unwrap();
    let val_windows = run_pipeline(&val.log, None, layout.clone(), params).unwrap();
    let test_windows = run_pipeline(&test.log, None, layout.clone(), params).unwrap();
    let benign_checked = train_windows.len() + val_windows.len() + test_windows.len();
    let benign_in_unit = in_unit(&train_windows) && in_unit(&val_windows) && in_unit(&test_windows);
    drop(test_windows);
    // Neighbouring windows overlap in 31 of 32 rows; every other one is
    // plenty for fitting.
    let fit: Vec<_> = train_windows.iter().step_by(2).map(|w| &w.data).collect();
    let all_train: Vec<_> = train_windows.iter().map(|w| &w.data).collect();
    let val_data: Vec<_> = val_windows.iter().map(|w| &w.data).collect();
    let started = Instant::now();
    let trained: TrainedModel =
        model::train(&fit, &val_data, &model_config(), layout.selection_hash(), params.t_us).unwrap();
    let train_seconds = started.elapsed().as_secs_f64();
    let cal = calibrate(&trained, &all_train, &val_data, Q).unwrap();
    let detector = Detector::new(trained, cal, layout.names().to_vec()).unwrap();

    let cruise = test
        .segments_of("cruise", 30.0)
        .into_iter()
        .find(|s| s.start_s > 20.0)
        .expect("test profile has a long cruise")
        .clone();
    Setup {
        db,
        layout,
        params,
        detector,
        val_windows,
        test_log: test.log,
        period: (cruise.start_s + 2.0, cruise.end_s - 2.0),
        train_seconds,
        benign_checked,
        benign_in_unit,
    }
}

pub fn plans(s: &Setup) -> Vec<AttackPlan> {
    let (a, b) = s.period;
    let wheels_stopped = PayloadGen::Override {
        values: WHEEL_SIGNALS.iter().map(|w| (w.to_string(), 0.0)).collect(),
    };
    let fuzz_rate = (0.06 * bus_rate(&s.test_log)).round();
    let mut plans = vec![
        AttackPlan::new(
            AttackKind::Fabrication {
                aid: SPEED_AID,
                payload: PayloadGen::set(SPEED_SIGNAL, 200.0),
            },
            a,
            b,
            1,
        ),
        AttackPlan::new(
            AttackKind::Masquerade {
                aid: WHEEL_AID,
                payload: wheels_stopped,
            },
            a,
            b,
            2,
        ),
        AttackPlan::new(
            AttackKind::Fuzzing {
                rate: fuzz_rate,
                aid_pool: Vec::new(),
                random_aids: false,
            },
            a,
            b,
            3,
        ),
        AttackPlan::new(AttackKind::Suspension { aid: SPEED_AID }, a, b, 4),
        AttackPlan::new(
            AttackKind::Replay {
                capture_start: 0.0,
                capture_end: 20.0,
            },
            a,
            b,
            5,
        ),
    ];
    for p in &mut plans {
        p.name = p.label();
    }
    plans
}

pub fn run(s: &Setup, plan: &AttackPlan) -> Experiment {
    run_experiment(&s.test_log, plan, &s.db, s.layout.clone(), s.params, &s.detector).unwrap()
}

/// Byte-level outputs of a full campaign: reports, table, model and
/// calibration files.
pub fn fingerprint(s: &Setup, experiments: &[Experiment]) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = experiments.iter().map(|e| e.report.to_json().into_bytes()).collect();
    let reports: Vec<_> = experiments.iter().map(|e| e.report.clone()).collect();
    out.push(canids::eval::campaign_table(&reports).into_bytes());
    let mut model = Vec::new();
    s.detector.model.save(&mut model).unwrap();
    out.push(model);
    let mut cal = Vec::new();
    s.detector.calibration.save(&mut cal).unwrap();
    out.push(cal);
    out
}
