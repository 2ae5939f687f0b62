//! Synthetic vehicle traffic.
//!
//! A small kinematic model drives a fixed twelve-stream database. Speed,
//! wheel speeds, engine speed and the various speed read-outs move
//! together; steering evolves independently. Every message is serialized
//! from the model state at its send time, so decoding the log recovers the
//! trajectories up to quantization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canlog::{secs_to_us, CanMessage, Payload};
use crate::dbc::{ByteOrder, CanDatabase, MessageSpec, SignalSpec};
use crate::deserialize::{encode_raw, insert_padded};
use crate::error::{Error, Result};

pub const SPEED_SIGNAL: &str = "VEH_SPEED";
pub const SPEED_AID: u16 = 0x0C0;
pub const WHEEL_AID: u16 = 0x0B0;
pub const WHEEL_SIGNALS: [&str; 4] = ["WHL_SPD_FL", "WHL_SPD_FR", "WHL_SPD_RL", "WHL_SPD_RR"];
pub const STEER_SIGNAL: &str = "STEER_ANGLE";
pub const COOLANT_SIGNAL: &str = "COOLANT_TEMP";

/// Model integration step.
const STEP_US: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Segment {
    Idle {
        duration_s: f64,
    },
    Accelerate {
        duration_s: f64,
        to_kmh: f64,
    },
    Cruise {
        duration_s: f64,
    },
    Brake {
        duration_s: f64,
        to_kmh: f64,
    },
    /// Holds speed while steering towards `angle_deg`.
    Turn {
        duration_s: f64,
        angle_deg: f64,
    },
}

impl Segment {
    pub fn duration_s(&self) -> f64 {
        match *self {
            Segment::Idle { duration_s }
            | Segment::Accelerate { duration_s, .. }
            | Segment::Cruise { duration_s }
            | Segment::Brake { duration_s, .. }
            | Segment::Turn { duration_s, .. } => duration_s,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Segment::Idle { .. } => "idle",
            Segment::Accelerate { .. } => "accelerate",
            Segment::Cruise { .. } => "cruise",
            Segment::Brake { .. } => "brake",
            Segment::Turn { .. } => "turn",
        }
    }
}

fn default_cycle() -> Vec<Segment> {
    vec![
        Segment::Idle { duration_s: 8.0 },
        Segment::Accelerate {
            duration_s: 12.0,
            to_kmh: 50.0,
        },
        Segment::Cruise { duration_s: 25.0 },
        Segment::Accelerate {
            duration_s: 10.0,
            to_kmh: 90.0,
        },
        Segment::Cruise { duration_s: 35.0 },
        Segment::Turn {
            duration_s: 6.0,
            angle_deg: 60.0,
        },
        Segment::Brake {
            duration_s: 8.0,
            to_kmh: 40.0,
        },
        Segment::Cruise { duration_s: 15.0 },
        Segment::Turn {
            duration_s: 5.0,
            angle_deg: -90.0,
        },
        Segment::Brake {
            duration_s: 8.0,
            to_kmh: 0.0,
        },
    ]
}

fn default_jitter() -> f64 {
    0.01
}

/// Generator configuration. The drive cycle repeats until `duration_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthProfile {
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    /// Timestamp of the log origin.
    #[serde(default)]
    pub start_s: f64,
    #[serde(default = "default_cycle")]
    pub cycle: Vec<Segment>,
    /// Send-time jitter as a fraction of each stream's period.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Per-message period overrides, keyed by message name.
    #[serde(default)]
    pub periods_ms: BTreeMap<String, u32>,
}

impl SynthProfile {
    pub fn driving(duration_s: f64, seed: u64) -> Self {
        SynthProfile {
            duration_s,
            seed,
            start_s: 0.0,
            cycle: default_cycle(),
            jitter: default_jitter(),
            periods_ms: BTreeMap::new(),
        }
    }

    /// Parked with the engine idling.
    pub fn stationary(duration_s: f64, seed: u64) -> Self {
        SynthProfile {
            cycle: vec![Segment::Idle { duration_s }],
            ..SynthProfile::driving(duration_s, seed)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::param(format!("synth profile: {}", e.message())))
    }

    fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::param("duration must be positive"));
        }
        if !(self.start_s >= 0.0) {
            return Err(Error::param("start time must be nonnegative"));
        }
        if self.cycle.is_empty() || self.cycle.iter().any(|s| !(s.duration_s() > 0.0)) {
            return Err(Error::param("drive cycle needs segments of positive duration"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::param("jitter must be in [0, 0.5)"));
        }
        for (name, &p) in &self.periods_ms {
            if p == 0 {
                return Err(Error::param(format!("period of {name} must be positive")));
            }
            if !STREAMS.iter().any(|s| s.name == name) {
                return Err(Error::param(format!("unknown stream {name}")));
            }
        }
        Ok(())
    }
}

/// Signal groups that move together; the first entry of the speed group is
/// the vehicle speed itself.
pub fn correlated_groups() -> Vec<Vec<&'static str>> {
    vec![
        vec![
            SPEED_SIGNAL,
            "WHL_SPD_FL",
            "WHL_SPD_FR",
            "WHL_SPD_RL",
            "WHL_SPD_RR",
            "ENG_RPM",
            "TCU_OUT_SPD",
            "CLU_DISP_SPEED",
            "PID_VEH_SPEED",
            "PID_ENG_RPM",
            "GEAR_POS",
            "TCU_GEAR",
        ],
        vec![STEER_SIGNAL, "STEER_RATE", "YAW_RATE", "LAT_ACCEL"],
    ]
}

/// The group containing `signal`, if any.
pub fn group_of(signal: &str) -> Option<Vec<&'static str>> {
    correlated_groups().into_iter().find(|g| g.contains(&signal))
}

struct Stream {
    aid: u16,
    name: &'static str,
    sender: &'static str,
    period_ms: u32,
}

const STREAMS: [Stream; 12] = [
    Stream {
        aid: 0x0A0,
        name: "EMS1",
        sender: "EMS",
        period_ms: 10,
    },
    Stream {
        aid: 0x0B0,
        name: "WHL_SPD",
        sender: "ESC",
        period_ms: 10,
    },
    Stream {
        aid: 0x0C0,
        name: "VCU1",
        sender: "VCU",
        period_ms: 20,
    },
    Stream {
        aid: 0x0D0,
        name: "SAS1",
        sender: "SAS",
        period_ms: 10,
    },
    Stream {
        aid: 0x1A0,
        name: "TCU1",
        sender: "TCU",
        period_ms: 20,
    },
    Stream {
        aid: 0x1B0,
        name: "ESC2",
        sender: "ESC",
        period_ms: 20,
    },
    Stream {
        aid: 0x2C0,
        name: "CLU1",
        sender: "CLU",
        period_ms: 100,
    },
    Stream {
        aid: 0x2D0,
        name: "EMS_TEMP",
        sender: "EMS",
        period_ms: 100,
    },
    Stream {
        aid: 0x3E0,
        name: "PID_RESP",
        sender: "EMS",
        period_ms: 1000,
    },
    Stream {
        aid: 0x4F0,
        name: "BODY1",
        sender: "BCM",
        period_ms: 1000,
    },
    Stream {
        aid: 0x5A0,
        name: "HVAC1",
        sender: "HVAC",
        period_ms: 1000,
    },
    Stream {
        aid: 0x5B0,
        name: "CGW1",
        sender: "CGW",
        period_ms: 100,
    },
];

fn le(name: &str, start: u16, len: u8) -> SignalSpec {
    SignalSpec::new(name, start, len, ByteOrder::LittleEndian)
}

fn be(name: &str, start: u16, len: u8) -> SignalSpec {
    SignalSpec::new(name, start, len, ByteOrder::BigEndian)
}

fn speed(sig: SignalSpec) -> SignalSpec {
    sig.scaled(0.03125, 0.0).range(0.0, 255.0).unit("km/h")
}

fn signals_of(aid: u16) -> Vec<SignalSpec> {
    match aid {
        0x0A0 => vec![
            le("ENG_RPM", 0, 16).scaled(0.25, 0.0).range(0.0, 8191.0).unit("rpm"),
            le("THROTTLE_POS", 16, 8).scaled(0.4, 0.0).range(0.0, 100.0).unit("%"),
            le("EMS1_ALIVE", 48, 4),
            le("EMS1_CHKSUM", 56, 8),
        ],
        0x0B0 => vec![
            speed(le("WHL_SPD_FL", 0, 14)),
            speed(le("WHL_SPD_FR", 14, 14)),
            speed(le("WHL_SPD_RL", 28, 14)),
            speed(le("WHL_SPD_RR", 42, 14)),
            le("WHL_SPD_ALIVECNT", 56, 4),
            le("WHL_SPD_CHKSUM", 60, 4),
        ],
        0x0C0 => vec![
            speed(be(SPEED_SIGNAL, 7, 16)),
            le("GEAR_POS", 16, 4).range(0.0, 6.0),
            le("BRAKE_ACT", 20, 1),
            le("VCU_MSGCNT", 24, 8),
        ],
        0x0D0 => vec![
            le(STEER_SIGNAL, 0, 16)
                .signed()
                .scaled(0.1, 0.0)
                .range(-780.0, 780.0)
                .unit("deg"),
            le("STEER_RATE", 16, 8)
                .scaled(4.0, 0.0)
                .range(0.0, 1016.0)
                .unit("deg/s"),
            le("SAS_ALIVE", 32, 4),
        ],
        0x1A0 => vec![
            speed(be("TCU_OUT_SPD", 7, 16)),
            le("TCU_GEAR", 16, 4).range(0.0, 6.0),
            le("TCU_MSGCOUNT", 24, 8),
        ],
        0x1B0 => vec![
            le("YAW_RATE", 0, 16)
                .signed()
                .scaled(0.01, 0.0)
                .range(-100.0, 100.0)
                .unit("deg/s"),
            le("LAT_ACCEL", 16, 16)
                .signed()
                .scaled(0.001, 0.0)
                .range(-10.0, 10.0)
                .unit("m/s2"),
            be("LON_ACCEL", 39, 16)
                .signed()
                .scaled(0.001, 0.0)
                .range(-10.0, 10.0)
                .unit("m/s2"),
        ],
        0x2C0 => vec![
            le("CLU_DISP_SPEED", 0, 8).range(0.0, 255.0).unit("km/h"),
            le("ODOMETER", 8, 24)
                .scaled(0.1, 0.0)
                .range(0.0, 1_677_721.5)
                .unit("km"),
        ],
        0x2D0 => vec![
            le(COOLANT_SIGNAL, 0, 8)
                .scaled(0.75, -48.0)
                .range(-48.0, 143.25)
                .unit("degC"),
            le("OIL_TEMP", 8, 8).scaled(1.0, -40.0).range(-40.0, 215.0).unit("degC"),
        ],
        0x3E0 => vec![
            le("PID_VEH_SPEED", 0, 8).range(0.0, 255.0).unit("km/h"),
            le("PID_ENG_RPM", 8, 16)
                .scaled(0.25, 0.0)
                .range(0.0, 8191.0)
                .unit("rpm"),
        ],
        0x4F0 => vec![
            le("BATT_VOLT", 0, 8).scaled(0.1, 0.0).range(0.0, 25.5).unit("V"),
            le("DOOR_OPEN", 8, 1),
            le("BODY_MUL_CODE", 16, 4),
        ],
        0x5A0 => vec![
            le("AMBIENT_TEMP", 0, 8)
                .scaled(0.5, -40.0)
                .range(-40.0, 87.5)
                .unit("degC"),
            le("HVAC_RESERVED", 8, 8).range(0.0, 0.0),
        ],
        0x5B0 => vec![le("CGW_STATUS", 0, 8).range(0.0, 3.0), le("CGW_ALIVE", 8, 4)],
        _ => unreachable!("stream table and signal table disagree"),
    }
}

/// The fixed database all synthetic logs conform to.
pub fn synthetic_database() -> CanDatabase {
    let messages = STREAMS
        .iter()
        .map(|s| MessageSpec {
            aid: s.aid,
            name: s.name.to_string(),
            dlc: 8,
            sender: s.sender.to_string(),
            signals: signals_of(s.aid),
        })
        .collect();
    let mut ecus: Vec<String> = STREAMS.iter().map(|s| s.sender.to_string()).collect();
    ecus.sort();
    ecus.dedup();
    let mut db = CanDatabase::new(ecus, messages).expect("synthetic database is valid");
    db.version = Some("synthetic-1".into());
    db
}

/// Time span of one drive-cycle segment, relative to the log origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpan {
    pub start_s: f64,
    pub end_s: f64,
    pub kind: &'static str,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub db: CanDatabase,
    pub log: Vec<CanMessage>,
    /// For each message, the unquantized value of each of its signals in
    /// declaration order.
    pub truth: Vec<Vec<f64>>,
    pub segments: Vec<SegmentSpan>,
}

impl SynthOutput {
    /// Segments of `kind` lasting at least `min_s`.
    pub fn segments_of(&self, kind: &str, min_s: f64) -> Vec<&SegmentSpan> {
        self.segments
            .iter()
            .filter(|s| s.kind == kind && s.end_s - s.start_s >= min_s)
            .collect()
    }
}

/// Mean-reverting noise term.
#[derive(Debug, Clone, Copy)]
struct Ou {
    value: f64,
    /// Reversion rate in 1/s.
    theta: f64,
    sigma: f64,
}

impl Ou {
    fn new(theta: f64, sigma: f64) -> Self {
        Ou {
            value: 0.0,
            theta,
            sigma,
        }
    }

    fn step(&mut self, dt: f64, rng: &mut ChaCha8Rng) {
        // Uniform increments with matched variance keep this cheap.
        let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
        self.value += -self.theta * self.value * dt + self.sigma * dt.sqrt() * u * 3f64.sqrt();
    }
}

/// Physical state of the simulated vehicle.
#[derive(Debug, Clone)]
pub struct VehicleState {
    pub speed_kmh: f64,
    pub accel: f64,
    pub wheel_kmh: [f64; 4],
    pub rpm: f64,
    pub gear: u8,
    pub steer_deg: f64,
    pub steer_rate: f64,
    pub yaw_rate: f64,
    pub lat_accel: f64,
    pub coolant_c: f64,
    pub oil_c: f64,
    pub throttle: f64,
    pub brake: bool,
    pub odometer_km: f64,
    pub battery_v: f64,
    pub ambient_c: f64,
    pub tcu_speed: f64,
}

const GEAR_UP: [f64; 5] = [15.0, 30.0, 50.0, 70.0, 95.0];
const GEAR_RPM_PER_KMH: [f64; 7] = [0.0, 100.0, 62.0, 44.0, 34.0, 27.0, 22.0];
const IDLE_RPM: f64 = 800.0;

struct Model {
    s: VehicleState,
    rng: ChaCha8Rng,
    cruise_target: Option<f64>,
    wheel_noise: [Ou; 4],
    cruise_noise: Ou,
    steer_noise: Ou,
    rpm_noise: Ou,
    throttle_noise: Ou,
    battery_noise: Ou,
    tcu_noise: Ou,
    time_s: f64,
}

impl Model {
    fn new(seed: u64) -> Self {
        Model {
            s: VehicleState {
                speed_kmh: 0.0,
                accel: 0.0,
                wheel_kmh: [0.0; 4],
                rpm: IDLE_RPM,
                gear: 0,
                steer_deg: 0.0,
                steer_rate: 0.0,
                yaw_rate: 0.0,
                lat_accel: 0.0,
                coolant_c: 25.0,
                oil_c: 22.0,
                throttle: 0.0,
                brake: true,
                odometer_km: 12_345.6,
                battery_v: 14.0,
                ambient_c: 21.0,
                tcu_speed: 0.0,
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
            cruise_target: None,
            wheel_noise: [Ou::new(0.5, 0.004); 4],
            cruise_noise: Ou::new(0.2, 0.6),
            steer_noise: Ou::new(0.8, 3.0),
            rpm_noise: Ou::new(2.0, 25.0),
            throttle_noise: Ou::new(1.0, 1.5),
            battery_noise: Ou::new(0.5, 0.05),
            tcu_noise: Ou::new(2.0, 0.002),
            time_s: 0.0,
        }
    }

    fn step(&mut self, seg: &Segment, scale: f64, dt: f64) {
        let rng = &mut self.rng;
        for n in self.wheel_noise.iter_mut().chain([
            &mut self.cruise_noise,
            &mut self.steer_noise,
            &mut self.rpm_noise,
            &mut self.throttle_noise,
            &mut self.battery_noise,
            &mut self.tcu_noise,
        ]) {
            n.step(dt, rng);
        }
        let s = &mut self.s;

        let holds_speed = matches!(seg, Segment::Cruise { .. } | Segment::Turn { .. });
        if !holds_speed {
            self.cruise_target = None;
        } else if self.cruise_target.is_none() {
            self.cruise_target = Some(s.speed_kmh);
        }
        let (target, a_max) = match *seg {
            Segment::Idle { .. } => (0.0, 3.0),
            Segment::Accelerate { to_kmh, .. } => (to_kmh * scale, 2.5),
            Segment::Brake { to_kmh, .. } => (to_kmh * scale, 3.5),
            Segment::Cruise { .. } | Segment::Turn { .. } => {
                let base = self.cruise_target.unwrap_or(0.0);
                ((base + self.cruise_noise.value).max(0.0), 1.0)
            }
        };
        // Desired acceleration in m/s², reached under a jerk limit.
        let desired = ((target - s.speed_kmh) / 3.6 / 2.0).clamp(-a_max, a_max);
        let jerk = 4.0 * dt;
        s.accel += (desired - s.accel).clamp(-jerk, jerk);
        s.speed_kmh = (s.speed_kmh + s.accel * 3.6 * dt).clamp(0.0, 250.0);
        if s.speed_kmh == 0.0 && s.accel < 0.0 {
            s.accel = 0.0;
        }

        for (w, n) in s.wheel_kmh.iter_mut().zip(&self.wheel_noise) {
            *w = s.speed_kmh * (1.0 + n.value.clamp(-0.019, 0.019));
        }
        s.tcu_speed = s.speed_kmh * (1.0 + self.tcu_noise.value.clamp(-0.005, 0.005));

        s.gear = if s.speed_kmh < 1.0 {
            0
        } else {
            1 + GEAR_UP.iter().filter(|&&g| s.speed_kmh > g).count() as u8
        };
        let base_rpm = (s.speed_kmh * GEAR_RPM_PER_KMH[s.gear as usize]).max(IDLE_RPM);
        s.rpm = (base_rpm + 150.0 * s.accel.max(0.0) + self.rpm_noise.value).clamp(600.0, 7000.0);
        s.throttle = if s.accel < -0.2 {
            0.0
        } else {
            (4.0 + 0.15 * s.speed_kmh + 12.0 * s.accel.max(0.0) + self.throttle_noise.value).clamp(0.0, 100.0)
        };
        s.brake = s.accel < -0.3 || (s.speed_kmh < 0.5 && matches!(seg, Segment::Idle { .. }));

        let steer_target = match *seg {
            Segment::Turn { angle_deg, .. } => angle_deg,
            _ => 0.0,
        };
        let prev = s.steer_deg;
        let toward = (steer_target - s.steer_deg).clamp(-200.0 * dt, 200.0 * dt);
        s.steer_deg = (s.steer_deg + toward + self.steer_noise.value * dt * 4.0).clamp(-700.0, 700.0);
        s.steer_rate = ((s.steer_deg - prev) / dt).abs().min(1016.0);
        let v = s.speed_kmh / 3.6;
        let yaw = v * (s.steer_deg.to_radians() / 15.0).tan() / 2.7;
        s.yaw_rate = yaw.to_degrees().clamp(-100.0, 100.0);
        s.lat_accel = (v * yaw).clamp(-10.0, 10.0);

        s.coolant_c += (90.0 - s.coolant_c) * dt / 150.0;
        s.oil_c += (100.0 - s.oil_c) * dt / 400.0;
        s.odometer_km += s.speed_kmh / 3600.0 * dt;
        s.battery_v = 14.0 + self.battery_noise.value;
        self.time_s += dt;
        s.ambient_c = 21.0 + 0.6 * (self.time_s / 90.0).sin();
    }
}

/// Intended physical values for the signals of `aid`, excluding the
/// counter and checksum fields filled in afterwards.
fn values_for(aid: u16, s: &VehicleState) -> Vec<f64> {
    let w = &s.wheel_kmh;
    match aid {
        0x0A0 => vec![s.rpm, s.throttle],
        0x0B0 => vec![w[0], w[1], w[2], w[3]],
        0x0C0 => vec![s.speed_kmh, s.gear as f64, s.brake as u8 as f64],
        0x0D0 => vec![s.steer_deg, s.steer_rate],
        0x1A0 => vec![s.tcu_speed, s.gear as f64],
        0x1B0 => vec![s.yaw_rate, s.lat_accel, s.accel.clamp(-10.0, 10.0)],
        0x2C0 => vec![(s.speed_kmh * 1.02).round().min(255.0), s.odometer_km],
        0x2D0 => vec![s.coolant_c, s.oil_c],
        0x3E0 => vec![s.speed_kmh.round().min(255.0), s.rpm],
        0x4F0 => vec![s.battery_v, 0.0, 2.0],
        0x5A0 => vec![s.ambient_c, 0.0],
        0x5B0 => vec![1.0],
        _ => unreachable!(),
    }
}

fn is_counter(name: &str) -> bool {
    let n = name.to_lowercase();
    ["alive", "msgcnt", "msgcount"].iter().any(|k| n.contains(k))
}

fn is_checksum(name: &str) -> bool {
    name.to_lowercase().contains("chksum")
}

/// Serializes one message; returns the payload and the intended values.
fn encode(spec: &MessageSpec, state: &VehicleState, counter: u64) -> Result<(Payload, Vec<f64>)> {
    let mut physical = values_for(spec.aid, state).into_iter();
    let mut bytes = [0u8; 8];
    let mut truth = vec![0.0; spec.signals.len()];
    let mut checksum = None;
    for (k, sig) in spec.signals.iter().enumerate() {
        let value = if is_checksum(&sig.name) {
            checksum = Some(k);
            continue;
        } else if is_counter(&sig.name) {
            (counter % (1u64 << sig.bit_length)) as f64
        } else {
            let v = physical.next().expect("one value per physical signal");
            v.clamp(sig.min_phys, sig.max_phys)
        };
        insert_padded(&mut bytes, sig, encode_raw(value, sig)?);
        truth[k] = value;
    }
    if let Some(k) = checksum {
        let sig = &spec.signals[k];
        let sum = bytes.iter().map(|&b| b as u64).sum::<u64>() % (1u64 << sig.bit_length);
        insert_padded(&mut bytes, sig, encode_raw(sum as f64, sig)?);
        truth[k] = sum as f64;
    }
    Ok((Payload::new(bytes, spec.dlc as usize), truth))
}

/// Runs the model over the profile and serializes every scheduled message.
pub fn generate(profile: &SynthProfile) -> Result<SynthOutput> {
    profile.validate()?;
    let db = synthetic_database();
    let duration_us = secs_to_us(profile.duration_s);
    let origin_us = secs_to_us(profile.start_s);

    // Send times per stream: random phase, periodic, bounded jitter.
    let mut sched_rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0x5C4E_D11E);
    let mut sends: Vec<(u64, u16)> = Vec::new();
    for st in &STREAMS {
        let period_us = profile.periods_ms.get(st.name).copied().unwrap_or(st.period_ms) as u64 * 1000;
        let phase = sched_rng.random_range(0..period_us);
        let half = profile.jitter * period_us as f64 / 2.0;
        let mut k = 0u64;
        loop {
            let nominal = phase + k * period_us;
            if nominal >= duration_us {
                break;
            }
            let j = if half > 0.0 {
                sched_rng.random_range(-half..half)
            } else {
                0.0
            };
            let t = (nominal as f64 + j).max(0.0) as u64;
            if t < duration_us {
                sends.push((t, st.aid));
            }
            k += 1;
        }
    }
    sends.sort_unstable();

    // Segment timeline; target speeds vary per cycle repetition.
    let mut cycle_rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0xC1C1_E000);
    let mut timeline: Vec<(u64, u64, usize, f64)> = Vec::new();
    let mut t = 0u64;
    while t < duration_us {
        let scale = cycle_rng.random_range(0.85..1.15);
        for (i, seg) in profile.cycle.iter().enumerate() {
            let end = t + secs_to_us(seg.duration_s()).max(1);
            timeline.push((t, end.min(duration_us), i, scale));
            t = end;
            if t >= duration_us {
                break;
            }
        }
    }
    let segments = timeline
        .iter()
        .map(|&(a, b, i, _)| SegmentSpan {
            start_s: a as f64 / 1e6,
            end_s: b as f64 / 1e6,
            kind: profile.cycle[i].name(),
        })
        .collect();

    let mut model = Model::new(profile.seed);
    let mut model_us = 0u64;
    let mut seg_idx = 0usize;
    let mut counters: BTreeMap<u16, u64> = BTreeMap::new();
    let mut log = Vec::with_capacity(sends.len());
    let mut truth = Vec::with_capacity(sends.len());
    let dt = STEP_US as f64 / 1e6;
    for (t_us, aid) in sends {
        while model_us + STEP_US <= t_us {
            while timeline[seg_idx].1 <= model_us {
                seg_idx += 1;
            }
            let (_, _, i, scale) = timeline[seg_idx];
            model.step(&profile.cycle[i], scale, dt);
            model_us += STEP_US;
        }
        let spec = db.message(aid).expect("scheduled aid is in the database");
        let counter = counters.entry(aid).or_insert(0);
        let (payload, values) = encode(spec, &model.s, *counter)?;
        *counter += 1;
        log.push(CanMessage::new(origin_us + t_us, aid, payload));
        truth.push(values);
    }
    Ok(SynthOutput {
        db,
        log,
        truth,
        segments,
    })
}
