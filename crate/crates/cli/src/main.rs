//! `canids`: train, calibrate and run the signal-level CAN intrusion detector.
//!
//! Exit status: 0 ok, 1 usage, 2 data error, 3 internal error. Failures are
//! reported as a single `error[kind]: message` line on stderr.

mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use canids::model::LayerFamily;

use config::{ModelOverrides, RunConfig};
use fail::{Failure, Kind};

#[derive(Parser, Debug)]
#[command(
    name = "canids",
    version,
    about = "Signal-level CAN intrusion detection with an explainable autoencoder"
)]
pub struct Cli {
    /// Run configuration (TOML); flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output on stderr (repeat for debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a DBC file and list its messages and signals
    ParseDbc(ParseDbcArgs),
    /// Per-AID message counts, inter-arrival times and payload diversity
    Stats(StatsArgs),
    /// Per-bit Hamming-distance profile of every stream
    Hamming(HammingArgs),
    /// Generate a synthetic vehicle log and its DBC
    Synth(SynthArgs),
    /// Choose the monitored signals from a DBC and a benign training log
    Select(SelectArgs),
    /// Turn logs into scaled feature ticks
    Features(FeaturesArgs),
    /// Train a reconstruction autoencoder on benign feature ticks
    Train(TrainArgs),
    /// Fit per-signal and detection thresholds
    Calibrate(CalibrateArgs),
    /// Inject an attack into a benign log
    Attack(AttackArgs),
    /// Score windows and raise explained alarms
    Detect(DetectArgs),
    /// Score detections against labels, or run an attack campaign end to end
    Eval(EvalArgs),
    /// Inference throughput per batch size
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct ParseDbcArgs {
    /// DBC file
    #[arg(long, value_name = "FILE")]
    pub dbc: Option<PathBuf>,
    /// Write the normalized DBC here instead of the signal table
    #[arg(long, value_name = "FILE")]
    pub canonical: Option<PathBuf>,
    /// Signal table output (CSV); stdout if absent
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Capture log (candump format)
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,
    /// DBC for message names and senders
    #[arg(long, value_name = "FILE")]
    pub dbc: Option<PathBuf>,
    /// Output CSV; stdout if absent. Times are in milliseconds
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HammingArgs {
    /// Capture log (candump format)
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,
    /// One row per AID (sum of d, flipped bits) instead of one row per bit
    #[arg(long)]
    pub summary: bool,
    /// Output CSV; stdout if absent
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output log (candump format)
    #[arg(long, value_name = "FILE")]
    pub out_log: PathBuf,
    /// Output DBC describing the synthetic vehicle
    #[arg(long, value_name = "FILE")]
    pub out_dbc: Option<PathBuf>,
    /// Drive-cycle segments as CSV (start_s, end_s, kind)
    #[arg(long, value_name = "FILE")]
    pub segments: Option<PathBuf>,
    /// Generation profile (TOML); overrides --duration and --stationary
    #[arg(long, value_name = "FILE")]
    pub profile: Option<PathBuf>,
    /// Log length [seconds]
    #[arg(long, default_value_t = 60.0, value_name = "SECONDS")]
    pub duration: f64,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parked vehicle with the engine idling instead of the drive cycle
    #[arg(long)]
    pub stationary: bool,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long, value_name = "FILE")]
    pub dbc: Option<PathBuf>,
    /// Benign training log
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,
    /// Exclusion keywords, comma separated (case-insensitive substrings)
    #[arg(long, value_delimiter = ',', value_name = "WORDS")]
    pub keywords: Option<Vec<String>>,
    /// Selection manifest to write
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long, value_name = "FILE")]
    pub dbc: Option<PathBuf>,
    /// Selection manifest
    #[arg(long, value_name = "FILE")]
    pub selection: Option<PathBuf>,
    /// Capture logs; each becomes its own segment
    #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
    pub log: Vec<PathBuf>,
    /// Sampling interval [seconds]
    #[arg(long, value_name = "SECONDS")]
    pub t: Option<f64>,
    /// Window length [ticks]
    #[arg(long, value_name = "TICKS")]
    pub w: Option<usize>,
    /// Clamp out-of-range values instead of failing (inference data)
    #[arg(long)]
    pub clamp: bool,
    /// Binary feature dump to write
    #[arg(long, short, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write the ticks as CSV
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training feature dump
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    /// Validation feature dump
    #[arg(long, value_name = "FILE")]
    pub val: PathBuf,
    /// Layer family: dense, lstm or bilstm
    #[arg(long, value_name = "FAMILY")]
    pub layer: Option<LayerFamily>,
    /// Encoder hidden widths, comma separated [units]
    #[arg(long, value_delimiter = ',', value_name = "UNITS")]
    pub encoder: Option<Vec<usize>>,
    /// Latent width [units]
    #[arg(long, value_name = "UNITS")]
    pub latent: Option<usize>,
    /// Decoder hidden widths, comma separated [units]
    #[arg(long, value_delimiter = ',', value_name = "UNITS")]
    pub decoder: Option<Vec<usize>>,
    /// Adam learning rate
    #[arg(long, value_name = "RATE")]
    pub lr: Option<f64>,
    /// Maximum training epochs
    #[arg(long, value_name = "EPOCHS")]
    pub epochs: Option<usize>,
    /// Early-stopping patience [epochs]
    #[arg(long, value_name = "EPOCHS")]
    pub patience: Option<usize>,
    /// Training seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mini-batch size [windows]
    #[arg(long, value_name = "WINDOWS")]
    pub batch_size: Option<usize>,
    /// Use every k-th training window [windows]
    #[arg(long, default_value_t = 1, value_name = "K")]
    pub stride: usize,
    /// Model file to write
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Per-epoch loss history as CSV
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
}

impl TrainArgs {
    pub fn overrides(&self) -> ModelOverrides {
        ModelOverrides {
            layer: self.layer,
            encoder: self.encoder.clone(),
            latent: self.latent,
            decoder: self.decoder.clone(),
            lr: self.lr,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Training feature dump
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    /// Validation feature dump
    #[arg(long, value_name = "FILE")]
    pub val: PathBuf,
    /// Quantile of benign max error rates used as the detection threshold [0.95, 1]
    #[arg(long, value_name = "QUANTILE")]
    pub q: Option<f64>,
    /// Calibration file to write
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Benign capture log
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,
    /// Attack plan or campaign (TOML); times are seconds after the first message
    #[arg(long, value_name = "FILE")]
    pub plan: PathBuf,
    /// Which plan of a campaign to apply [0-based]
    #[arg(long, value_name = "N")]
    pub index: Option<usize>,
    /// DBC, needed for payload generators that set signals
    #[arg(long, value_name = "FILE")]
    pub dbc: Option<PathBuf>,
    /// Attacked log to write
    #[arg(long, short, value_name = "FILE")]
    pub out: PathBuf,
    /// Window labels to write (CSV); needs --selection and the DBC
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub selection: Option<PathBuf>,
    /// Sampling interval [seconds]
    #[arg(long, value_name = "SECONDS")]
    pub t: Option<f64>,
    /// Window length [ticks]
    #[arg(long, value_name = "TICKS")]
    pub w: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub calibration: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub dbc: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub selection: Option<PathBuf>,
    /// Capture log to score offline
    #[arg(long, value_name = "FILE", conflicts_with = "stream")]
    pub log: Option<PathBuf>,
    /// Read candump lines from stdin and score them as they arrive
    #[arg(long)]
    pub stream: bool,
    /// Pace stdin replay by message timestamps (with --stream)
    #[arg(long, requires = "stream")]
    pub realtime: bool,
    /// Inference batch size [windows]
    #[arg(long, value_name = "WINDOWS")]
    pub batch: Option<usize>,
    /// JSON-lines detections; stdout if absent
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Error-rate heatmap CSV (offline mode)
    #[arg(long, value_name = "FILE")]
    pub heatmap: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// JSON-lines detections from `detect`
    #[arg(long, value_name = "FILE", requires = "labels", conflicts_with = "plan")]
    pub detections: Option<PathBuf>,
    /// Window labels from `attack --labels`
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Benign log to attack (campaign mode)
    #[arg(long, value_name = "FILE", requires = "plan")]
    pub log: Option<PathBuf>,
    /// Attack plan or campaign (TOML)
    #[arg(long, value_name = "FILE")]
    pub plan: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub calibration: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub dbc: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub selection: Option<PathBuf>,
    /// Report name in detections mode
    #[arg(long, default_value = "detections")]
    pub name: String,
    /// JSON report lines; stdout if absent
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Campaign table CSV
    #[arg(long, value_name = "FILE")]
    pub table: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Trained model; without it an untrained model of the given shape is used
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Layer family of the untrained model
    #[arg(long, default_value = "dense", value_name = "FAMILY")]
    pub layer: LayerFamily,
    /// Window length of the untrained model [ticks]
    #[arg(long, default_value_t = 32, value_name = "TICKS")]
    pub w: usize,
    /// Signal count of the untrained model
    #[arg(long, default_value_t = 24, value_name = "SIGNALS")]
    pub x: usize,
    /// Batch sizes, comma separated [windows]
    #[arg(long, value_delimiter = ',', default_value = "1,8,32,128", value_name = "WINDOWS")]
    pub batch: Vec<usize>,
    /// Timed runs per batch size; the median is reported
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Minimum duration of each run [milliseconds]
    #[arg(long, default_value_t = 200.0, value_name = "MS")]
    pub min_ms: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; stdout if absent
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let verbosity = cli.verbose.max(cfg.verbosity.unwrap_or(0));
    let level = match verbosity {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();

    use Command::*;
    match &cli.command {
        ParseDbc(a) => commands::parse_dbc(&cfg, a),
        Stats(a) => commands::stats(&cfg, a),
        Hamming(a) => commands::hamming(a),
        Synth(a) => commands::synth(a),
        Select(a) => commands::select(&cfg, a),
        Features(a) => commands::features(&cfg, a),
        Train(a) => commands::train(&cfg, a),
        Calibrate(a) => commands::calibrate(&cfg, a),
        Attack(a) => commands::attack(&cfg, a),
        Detect(a) => commands::detect(&cfg, a),
        Eval(a) => commands::eval(&cfg, a),
        Bench(a) => commands::bench(a),
    }
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| info.payload().downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        let at = info
            .location()
            .map(|l| format!(" at {}:{}", l.file(), l.line()))
            .unwrap_or_default();
        eprintln!("{}", Failure::internal(format!("{msg}{at}")));
        std::process::exit(Kind::Internal as i32);
    }));

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // First paragraph of clap's message, without the usage block.
            let text = e.to_string();
            let head = text.split("\n\n").next().unwrap_or("");
            eprintln!("{}", Failure::usage(head.trim_start_matches("error: ")));
            return ExitCode::from(Kind::Usage as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
