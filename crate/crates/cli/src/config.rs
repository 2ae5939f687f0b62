//! Run configuration: an optional TOML file whose values any flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use canids::model::{LayerFamily, ModelConfig};

use crate::fail::Failure;

pub const DEFAULT_T: f64 = 0.01;
pub const DEFAULT_W: usize = 32;
pub const DEFAULT_Q: f64 = 0.99;
pub const DEFAULT_BATCH: usize = 8;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dbc: Option<PathBuf>,
    pub selection: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    /// Sampling interval in seconds.
    pub t: Option<f64>,
    /// Window length in ticks.
    pub w: Option<usize>,
}

/// Model settings; anything left out falls back to the family defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layer_family: Option<LayerFamily>,
    pub encoder: Option<Vec<usize>>,
    pub latent_dim: Option<usize>,
    pub decoder: Option<Vec<usize>>,
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub seed: Option<u64>,
    pub batch_size_train: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSection {
    pub q: Option<f64>,
    /// Inference batch size.
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub pipeline: PipelineSection,
    pub model: ModelSection,
    pub detect: DetectSection,
    pub verbosity: Option<u8>,
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.dbc,
            &mut cfg.paths.selection,
            &mut cfg.paths.model,
            &mut cfg.paths.calibration,
            &mut cfg.paths.reports,
        ] {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    pub fn t(&self, flag: Option<f64>) -> Result<f64, Failure> {
        let t = flag.or(self.pipeline.t).unwrap_or(DEFAULT_T);
        if !(t > 0.0 && t.is_finite()) {
            return Err(Failure::usage(format!("t must be positive, got {t}")));
        }
        Ok(t)
    }

    pub fn w(&self, flag: Option<usize>) -> Result<usize, Failure> {
        let w = flag.or(self.pipeline.w).unwrap_or(DEFAULT_W);
        if w == 0 {
            return Err(Failure::usage("w must be at least 1"));
        }
        Ok(w)
    }

    pub fn q(&self, flag: Option<f64>) -> Result<f64, Failure> {
        let q = flag.or(self.detect.q).unwrap_or(DEFAULT_Q);
        if !(0.95..=1.0).contains(&q) {
            return Err(Failure::usage(format!("q must lie in [0.95, 1], got {q}")));
        }
        Ok(q)
    }

    pub fn batch(&self, flag: Option<usize>) -> Result<usize, Failure> {
        let b = flag.or(self.detect.batch).unwrap_or(DEFAULT_BATCH);
        if b == 0 {
            return Err(Failure::usage("batch size must be at least 1"));
        }
        Ok(b)
    }

    /// Resolves a path from the flag, then the config file.
    pub fn path(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
        flag.clone()
            .or_else(|| configured.clone())
            .ok_or_else(|| Failure::usage(format!("missing --{what} (flag or [paths] {what} in the config)")))
    }
}

/// Flag overrides for the model section.
#[derive(Debug, Clone, Default)]
pub struct ModelOverrides {
    pub layer: Option<LayerFamily>,
    pub encoder: Option<Vec<usize>>,
    pub latent: Option<usize>,
    pub decoder: Option<Vec<usize>>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
}

impl ModelSection {
    /// Flags, then config, then the family defaults for `x` signals.
    pub fn resolve(&self, o: &ModelOverrides, x: usize) -> ModelConfig {
        let family = o.layer.or(self.layer_family).unwrap_or(LayerFamily::Dense);
        let d = ModelConfig::for_family(family, x);
        ModelConfig {
            layer_family: family,
            encoder: o.encoder.clone().or_else(|| self.encoder.clone()).unwrap_or(d.encoder),
            latent_dim: o.latent.or(self.latent_dim).unwrap_or(d.latent_dim),
            decoder: o.decoder.clone().or_else(|| self.decoder.clone()).unwrap_or(d.decoder),
            learning_rate: o.lr.or(self.learning_rate).unwrap_or(d.learning_rate),
            max_epochs: o.epochs.or(self.max_epochs).unwrap_or(d.max_epochs),
            early_stop_patience: o.patience.or(self.early_stop_patience).unwrap_or(d.early_stop_patience),
            seed: o.seed.or(self.seed).unwrap_or(d.seed),
            batch_size_train: o.batch_size.or(self.batch_size_train).unwrap_or(d.batch_size_train),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_config_beat_defaults() {
        let cfg: RunConfig = toml::from_str(
            "[pipeline]\nt = 0.005\nw = 150\n[model]\nlayer_family = \"lstm\"\nlearning_rate = 0.01\n[detect]\nq = 0.993\n",
        )
        .unwrap();
        assert_eq!(cfg.t(None).unwrap(), 0.005);
        assert_eq!(cfg.t(Some(0.02)).unwrap(), 0.02);
        assert_eq!(cfg.w(None).unwrap(), 150);
        assert_eq!(cfg.q(None).unwrap(), 0.993);
        assert_eq!(cfg.batch(None).unwrap(), DEFAULT_BATCH);
        let m = cfg.model.resolve(
            &ModelOverrides {
                lr: Some(1e-4),
                ..Default::default()
            },
            10,
        );
        assert_eq!(m.layer_family, LayerFamily::Lstm);
        assert_eq!(m.learning_rate, 1e-4);
        assert_eq!(m.encoder, ModelConfig::for_family(LayerFamily::Lstm, 10).encoder);
    }

    #[test]
    fn invariants_are_usage_errors() {
        let cfg = RunConfig::default();
        assert!(cfg.t(Some(0.0)).is_err());
        assert!(cfg.w(Some(0)).is_err());
        assert!(cfg.q(Some(0.9)).is_err());
        assert!(cfg.q(Some(1.01)).is_err());
        assert!(cfg.batch(Some(0)).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[pipeline]\ntick = 1\n").is_err());
    }
}
