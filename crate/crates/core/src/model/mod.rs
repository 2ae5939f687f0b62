//! Reconstruction autoencoder over feature windows.
//!
//! Everything (forward, backward, optimizer) is implemented here on top of
//! `ndarray` matrices. Parameters live in one flat vector described by a
//! [`ParamLayout`], which keeps the optimizer, gradient checking and
//! serialization layer-agnostic.

pub mod container;
pub mod dense;
pub mod optim;
pub mod params;
pub mod recurrent;

use std::fmt::Write as _;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use self::container::{Container, NamedTensor};
use self::dense::DenseNet;
use self::optim::Adam;
use self::params::ParamLayout;
use self::recurrent::RecurrentAe;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerFamily {
    Dense,
    Lstm,
    Bilstm,
}

impl std::str::FromStr for LayerFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(LayerFamily::Dense),
            "lstm" => Ok(LayerFamily::Lstm),
            "bilstm" => Ok(LayerFamily::Bilstm),
            other => Err(Error::param(format!("unknown layer family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_family: LayerFamily,
    /// Hidden widths between the input and the latent layer.
    pub encoder: Vec<usize>,
    pub latent_dim: usize,
    /// Hidden widths between the latent layer and the output.
    pub decoder: Vec<usize>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub batch_size_train: usize,
}

impl ModelConfig {
    /// Reasonable desk-scale shapes for a `w × x` input.
    pub fn for_family(family: LayerFamily, x: usize) -> Self {
        let (encoder, latent_dim, decoder) = match family {
            LayerFamily::Dense => (vec![128], 16, vec![128]),
            LayerFamily::Lstm | LayerFamily::Bilstm => (vec![2 * x], 2 * x, vec![2 * x, 2 * x]),
        };
        ModelConfig {
            layer_family: family,
            encoder,
            latent_dim,
            decoder,
            learning_rate: 1e-4,
            max_epochs: 1000,
            early_stop_patience: 50,
            seed: 7,
            batch_size_train: 64,
        }
    }

    pub fn validate(&self, w: usize, x: usize) -> Result<()> {
        if w == 0 || x == 0 {
            return Err(Error::Shape(format!("window {w}×{x} is empty")));
        }
        if self.latent_dim == 0 || self.latent_dim >= w * x {
            return Err(Error::param(format!(
                "latent_dim {} must be in 1..{} (w·x)",
                self.latent_dim,
                w * x
            )));
        }
        let widths = self
            .encoder
            .iter()
            .chain(&self.decoder)
            .chain(std::iter::once(&self.latent_dim));
        for &width in widths.clone() {
            if width == 0 {
                return Err(Error::param("layer widths must be positive"));
            }
        }
        if self.layer_family == LayerFamily::Bilstm && widths.clone().any(|w| w % 2 != 0) {
            return Err(Error::param("bilstm widths must be even (split across directions)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning rate must be positive"));
        }
        if self.batch_size_train == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    Dense(DenseNet),
    Recurrent(RecurrentAe),
}

/// A `w × x` autoencoder with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    config: ModelConfig,
    w: usize,
    x: usize,
    layout: ParamLayout,
    net: Net,
    params: Vec<f64>,
}

impl Autoencoder {
    /// Builds the network and draws initial weights from `config.seed`.
    pub fn new(config: ModelConfig, w: usize, x: usize) -> Result<Self> {
        config.validate(w, x)?;
        let mut layout = ParamLayout::default();
        let net = match config.layer_family {
            LayerFamily::Dense => {
                let mut sizes = vec![w * x];
                sizes.extend(&config.encoder);
                sizes.push(config.latent_dim);
                sizes.extend(&config.decoder);
                sizes.push(w * x);
                Net::Dense(DenseNet::new(&mut layout, "dense", &sizes))
            }
            family => Net::Recurrent(RecurrentAe::new(
                &mut layout,
                x,
                &config.encoder,
                config.latent_dim,
                &config.decoder,
                family == LayerFamily::Bilstm,
            )),
        };
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        match &net {
            Net::Dense(d) => d.init(&layout, &mut params, &mut rng),
            Net::Recurrent(r) => r.init(&layout, &mut params, &mut rng),
        }
        Ok(Autoencoder {
            config,
            w,
            x,
            layout,
            net,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.w, self.x)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn check(&self, s: &ArrayView2<f64>) -> Result<()> {
        if s.dim() != (self.w, self.x) {
            return Err(Error::Shape(format!(
                "window is {}×{}, model expects {}×{}",
                s.nrows(),
                s.ncols(),
                self.w,
                self.x
            )));
        }
        Ok(())
    }

    fn flatten(&self, batch: &[&Array2<f64>]) -> Array2<f64> {
        let d = self.w * self.x;
        let mut out = Array2::zeros((batch.len(), d));
        for (b, s) in batch.iter().enumerate() {
            for (k, v) in s.iter().enumerate() {
                out[[b, k]] = *v;
            }
        }
        out
    }

    fn to_steps(&self, batch: &[&Array2<f64>]) -> Vec<Array2<f64>> {
        (0..self.w)
            .map(|t| {
                let mut m = Array2::zeros((batch.len(), self.x));
                for (b, s) in batch.iter().enumerate() {
                    m.row_mut(b).assign(&s.row(t));
                }
                m
            })
            .collect()
    }

    /// Reconstructs a batch of windows. Shapes must already be checked.
    fn forward_unchecked(&self, batch: &[&Array2<f64>]) -> Vec<Array2<f64>> {
        match &self.net {
            Net::Dense(d) => {
                let out = d
                    .forward(&self.layout, &self.params, self.flatten(batch).view())
                    .into_output();
                out.outer_iter()
                    .map(|row| Array2::from_shape_vec((self.w, self.x), row.to_vec()).expect("w·x row"))
                    .collect()
            }
            Net::Recurrent(r) => {
                let tr = r.forward(&self.layout, &self.params, &self.to_steps(batch));
                (0..batch.len())
                    .map(|b| {
                        let mut m = Array2::zeros((self.w, self.x));
                        for (t, y) in tr.ys.iter().enumerate() {
                            m.row_mut(t).assign(&y.row(b));
                        }
                        m
                    })
                    .collect()
            }
        }
    }

    pub fn reconstruct(&self, s: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(&s.view())?;
        Ok(self.forward_unchecked(&[s]).pop().expect("one output per input"))
    }

    pub fn reconstruct_batch(&self, batch: &[&Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        for s in batch {
            self.check(&s.view())?;
        }
        Ok(self.forward_unchecked(batch))
    }

    /// Mean global MSE of a batch and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, batch: &[&Array2<f64>]) -> Result<(f64, Vec<f64>)> {
        for s in batch {
            self.check(&s.view())?;
        }
        let n = (batch.len() * self.w * self.x) as f64;
        let mut grad = vec![0.0; self.params.len()];
        let loss = match &self.net {
            Net::Dense(d) => {
                let input = self.flatten(batch);
                let trace = d.forward(&self.layout, &self.params, input.view());
                let diff = trace.output() - &input;
                let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
                let d_out = diff * (2.0 / n);
                d.backward(&self.layout, &self.params, &trace, &d_out, &mut grad);
                loss
            }
            Net::Recurrent(r) => {
                let xs = self.to_steps(batch);
                let trace = r.forward(&self.layout, &self.params, &xs);
                let mut loss = 0.0;
                let d_ys: Vec<Array2<f64>> = trace
                    .ys
                    .iter()
                    .zip(&xs)
                    .map(|(y, x)| {
                        let diff = y - x;
                        loss += diff.iter().map(|v| v * v).sum::<f64>();
                        diff * (2.0 / n)
                    })
                    .collect();
                r.backward(&self.layout, &self.params, &trace, &d_ys, &mut grad);
                loss / n
            }
        };
        Ok((loss, grad))
    }

    /// Mean global MSE without gradients.
    pub fn batch_loss(&self, batch: &[&Array2<f64>]) -> Result<f64> {
        let outs = self.reconstruct_batch(batch)?;
        let total: f64 = batch.iter().zip(&outs).map(|(s, o)| global_mse(s, o)).sum();
        Ok(total / batch.len().max(1) as f64)
    }
}

/// Per-signal reconstruction losses `l` of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector(pub Vec<f64>);

impl LossVector {
    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// Mean of squared elementwise differences over the whole window.
pub fn global_mse(s: &Array2<f64>, s_rec: &Array2<f64>) -> f64 {
    let n = s.len() as f64;
    s.iter().zip(s_rec.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

/// Column-wise mean squared error: `l_i = (1/w) Σ_j (S_ji − S'_ji)²`.
pub fn signalwise_mse(s: &Array2<f64>, s_rec: &Array2<f64>) -> LossVector {
    let w = s.nrows() as f64;
    let mut l = vec![0.0; s.ncols()];
    for (row, row_rec) in s.outer_iter().zip(s_rec.outer_iter()) {
        for ((acc, a), b) in l.iter_mut().zip(row).zip(row_rec) {
            *acc += (a - b) * (a - b);
        }
    }
    LossVector(l.into_iter().map(|v| v / w).collect())
}

pub fn signalwise_loss(model: &Autoencoder, s: &Array2<f64>) -> Result<LossVector> {
    let rec = model.reconstruct(s)?;
    Ok(signalwise_mse(s, &rec))
}

/// Windows per forward pass when scoring many windows.
pub const SCORING_CHUNK: usize = 64;

/// Loss vectors for many windows, fanned out over fixed-size chunks.
pub fn signalwise_losses(model: &Autoencoder, windows: &[&Array2<f64>]) -> Result<Vec<LossVector>> {
    for s in windows {
        model.check(&s.view())?;
    }
    Ok(par::map_chunks(windows, SCORING_CHUNK, |chunk| {
        let outs = model.forward_unchecked(chunk);
        chunk.iter().zip(&outs).map(|(s, o)| signalwise_mse(s, o)).collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// A fitted model plus the context it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Autoencoder,
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub selection_hash: u64,
    pub t_us: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    w: usize,
    x: usize,
    t_us: u64,
    selection_hash: u64,
    best_epoch: usize,
    history: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn best_val_mse(&self) -> Option<f64> {
        self.history.get(self.best_epoch.checked_sub(1)?).map(|r| r.val_mse)
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse\n");
        for r in &self.history {
            let _ = writeln!(out, "{},{},{}", r.epoch, r.train_mse, r.val_mse);
        }
        out
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let (w, x) = self.model.shape();
        let meta = ModelMeta {
            kind: "model".into(),
            config: self.model.config.clone(),
            w,
            x,
            t_us: self.t_us,
            selection_hash: self.selection_hash,
            best_epoch: self.best_epoch,
            history: self.history.clone(),
        };
        let tensors = self
            .model
            .layout
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                rows: e.rows,
                cols: e.cols,
                data: self.model.params[e.range()].iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Container {
            meta: serde_json::to_value(meta).map_err(|e| Error::format(e.to_string()))?,
            tensors,
        }
        .write(out)
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let c = Container::read(input)?;
        if c.kind() != Some("model") {
            return Err(Error::format("container does not hold a model"));
        }
        let meta: ModelMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::format(e.to_string()))?;
        let mut model = Autoencoder::new(meta.config, meta.w, meta.x)?;
        for e in model.layout.entries().to_vec() {
            let t = c
                .tensor(&e.name)
                .ok_or_else(|| Error::format(format!("missing tensor {}", e.name)))?;
            if (t.rows, t.cols) != (e.rows, e.cols) {
                return Err(Error::Shape(format!("tensor {} has wrong shape", e.name)));
            }
            for (dst, &src) in model.params[e.range()].iter_mut().zip(&t.data) {
                *dst = src as f64;
            }
        }
        Ok(TrainedModel {
            model,
            history: meta.history,
            best_epoch: meta.best_epoch,
            selection_hash: meta.selection_hash,
            t_us: meta.t_us,
        })
    }
}

/// Fits an autoencoder on benign windows with Adam and early stopping on
/// validation MSE. The returned weights are those of the best validation
/// epoch, rounded to `f32` so that saving and loading is lossless.
pub fn train(
    train_set: &[&Array2<f64>],
    val_set: &[&Array2<f64>],
    cfg: &ModelConfig,
    selection_hash: u64,
    t_us: u64,
) -> Result<TrainedModel> {
    let first = train_set.first().ok_or_else(|| Error::param("empty training set"))?;
    if val_set.is_empty() {
        return Err(Error::param("empty validation set"));
    }
    let (w, x) = first.dim();
    if let Some(bad) = train_set.iter().chain(val_set).find(|s| s.dim() != (w, x)) {
        return Err(Error::Shape(format!(
            "window {:?} differs from {:?}",
            bad.dim(),
            (w, x)
        )));
    }
    let mut model = Autoencoder::new(cfg.clone(), w, x)?;
    let mut opt = Adam::new(model.param_count(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, model.params.clone(), 0usize);
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size_train) {
            let batch: Vec<&Array2<f64>> = idx.iter().map(|&i| train_set[i]).collect();
            let (loss, grad) = model.loss_and_grad(&batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            sum += loss * batch.len() as f64;
            opt.step(&mut model.params, &grad);
        }
        let train_mse = sum / train_set.len() as f64;
        let val_mse = mean_loss(&model, val_set);
        if !val_mse.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("epoch {epoch}: train {train_mse:.6e} val {val_mse:.6e}");
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < best.0 {
            best = (val_mse, model.params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    model.params = best.1.into_iter().map(|v| v as f32 as f64).collect();
    Ok(TrainedModel {
        model,
        history,
        best_epoch: best.2,
        selection_hash,
        t_us,
    })
}

/// Mean global MSE over many windows.
pub fn mean_loss(model: &Autoencoder, windows: &[&Array2<f64>]) -> f64 {
    let per_chunk = par::map_chunks(windows, SCORING_CHUNK, |chunk| {
        let outs = model.forward_unchecked(chunk);
        vec![chunk.iter().zip(&outs).map(|(s, o)| global_mse(s, o)).sum::<f64>()]
    });
    per_chunk.iter().sum::<f64>() / windows.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients of the mean global MSE on `windows` against
/// central finite differences for `samples` randomly chosen parameters.
pub fn gradient_check(
    model: &Autoencoder,
    windows: &[&Array2<f64>],
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheck> {
    let (_, grad) = model.loss_and_grad(windows)?;
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.param_count();
    let mut idx: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        (0..samples).map(|_| rng.random_range(0..n)).collect()
    };
    idx.sort_unstable();
    idx.dedup();
    let mut max_rel_err: f64 = 0.0;
    for &k in &idx {
        let orig = probe.params[k];
        probe.params[k] = orig + eps;
        let plus = probe.batch_loss(windows)?;
        probe.params[k] = orig - eps;
        let minus = probe.batch_loss(windows)?;
        probe.params[k] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grad[k];
        let scale = analytic.abs().max(numeric.abs());
        // Both below the finite-difference noise floor: nothing to compare.
        if scale < 1e-10 {
            continue;
        }
        max_rel_err = max_rel_err.max((analytic - numeric).abs() / scale);
    }
    Ok(GradCheck {
        max_rel_err,
        checked: idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn random_window(w: usize, x: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((w, x), |_| rng.random::<f64>())
    }

    fn small(family: LayerFamily) -> ModelConfig {
        let (encoder, latent_dim, decoder) = match family {
            LayerFamily::Dense => (vec![12], 6, vec![12]),
            _ => (vec![6], 4, vec![6]),
        };
        ModelConfig {
            layer_family: family,
            encoder,
            latent_dim,
            decoder,
            learning_rate: 1e-3,
            max_epochs: 5,
            early_stop_patience: 3,
            seed: 11,
            batch_size_train: 4,
        }
    }

    #[test]
    fn mse_examples() {
        let a = Array2::zeros((1, 2));
        let b = Array2::ones((1, 2));
        assert_eq!(global_mse(&a, &a), 0.0);
        assert_eq!(global_mse(&a, &b), 1.0);
        let s = Array2::from_shape_vec((2, 1), vec![0.0, 0.0]).unwrap();
        let r = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        assert_eq!(global_mse(&s, &r), 0.5);
        assert_eq!(signalwise_mse(&s, &r).0, vec![0.5]);
        assert_eq!(signalwise_mse(&s, &s).0, vec![0.0]);
    }

    #[test]
    fn signalwise_mean_is_global() {
        for seed in 0..50 {
            let s = random_window(7, 5, seed);
            let r = random_window(7, 5, seed + 1000);
            let l = signalwise_mse(&s, &r);
            assert!((l.mean() - global_mse(&s, &r)).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruct_shape_and_determinism() {
        for family in [LayerFamily::Dense, LayerFamily::Lstm, LayerFamily::Bilstm] {
            let m = Autoencoder::new(small(family), 5, 3).unwrap();
            let s = random_window(5, 3, 1);
            let a = m.reconstruct(&s).unwrap();
            let b = m.reconstruct(&s).unwrap();
            assert_eq!(a.dim(), (5, 3));
            assert_eq!(a, b);
            assert!(m.reconstruct(&random_window(4, 3, 1)).is_err());
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let mut m = Autoencoder::new(small(LayerFamily::Dense), 4, 3).unwrap();
        m.params_mut().fill(0.0);
        let out = m.reconstruct(&random_window(4, 3, 2)).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_model_bias_gradients_match() {
        // All-zero input and weights: the output is sigmoid(b) and only the
        // output bias sees a gradient.
        let mut m = Autoencoder::new(small(LayerFamily::Dense), 4, 3).unwrap();
        m.params_mut().fill(0.0);
        let s = Array2::zeros((4, 3));
        let (_, grad) = m.loss_and_grad(&[&s]).unwrap();
        let out_bias = m.layout().entries().last().unwrap().clone();
        // d/db (0.5 - 0)^2 / 12 through the sigmoid slope 0.25.
        for &g in &grad[out_bias.range()] {
            assert!((g - 2.0 * 0.5 * 0.25 / 12.0).abs() < 1e-15);
        }
        let check = gradient_check(&m, &[&s], 1000, 1e-5, 0).unwrap();
        assert!(check.max_rel_err < 1e-8, "{check:?}");
    }

    #[test]
    fn gradient_checks_pass_for_every_family() {
        let windows: Vec<Array2<f64>> = (0..3).map(|k| random_window(4, 3, k)).collect();
        let refs: Vec<&Array2<f64>> = windows.iter().collect();
        for (family, tol) in [
            (LayerFamily::Dense, 1e-4),
            (LayerFamily::Lstm, 1e-3),
            (LayerFamily::Bilstm, 1e-3),
        ] {
            let m = Autoencoder::new(small(family), 4, 3).unwrap();
            let check = gradient_check(&m, &refs, 100, 1e-5, 3).unwrap();
            assert!(check.max_rel_err < tol, "{family:?}: {check:?}");
            assert!(check.checked > 50);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small(LayerFamily::Bilstm);
        c.latent_dim = 5;
        assert!(Autoencoder::new(c, 4, 3).is_err());
        let mut c = small(LayerFamily::Dense);
        c.latent_dim = 12;
        assert!(Autoencoder::new(c, 4, 3).is_err());
    }

    #[test]
    fn identical_windows_are_learned() {
        let s = random_window(4, 3, 9);
        let train_set: Vec<&Array2<f64>> = vec![&s; 32];
        let mut cfg = small(LayerFamily::Dense);
        cfg.learning_rate = 1e-2;
        cfg.max_epochs = 300;
        cfg.early_stop_patience = 300;
        let m = train(&train_set, &train_set[..4], &cfg, 0, 1000).unwrap();
        let first = m.history[0].val_mse;
        let last = m.best_val_mse().unwrap();
        assert!(last < 1e-4 && last < first / 100.0, "{first} -> {last}");
    }

    #[test]
    fn training_is_reproducible_and_keeps_best_epoch() {
        let windows: Vec<Array2<f64>> = (0..24).map(|k| random_window(4, 3, k)).collect();
        let refs: Vec<&Array2<f64>> = windows.iter().collect();
        let cfg = small(LayerFamily::Lstm);
        let a = train(&refs[..16], &refs[16..], &cfg, 1, 2).unwrap();
        let b = train(&refs[..16], &refs[16..], &cfg, 1, 2).unwrap();
        assert_eq!(a, b);
        let best = a.best_val_mse().unwrap();
        assert!(a.history[a.best_epoch - 1..].iter().all(|r| best <= r.val_mse));
    }

    #[test]
    fn save_load_is_lossless() {
        let windows: Vec<Array2<f64>> = (0..8).map(|k| random_window(4, 3, k)).collect();
        let refs: Vec<&Array2<f64>> = windows.iter().collect();
        let m = train(&refs, &refs, &small(LayerFamily::Bilstm), 42, 5000).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = TrainedModel::load(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.history_csv().lines().count(), m.history.len() + 1);
    }

    #[test]
    fn batch_scoring_matches_single() {
        let m = Autoencoder::new(small(LayerFamily::Dense), 4, 3).unwrap();
        let windows: Vec<Array2<f64>> = (0..130).map(|k| random_window(4, 3, k)).collect();
        let refs: Vec<&Array2<f64>> = windows.iter().collect();
        let batch = signalwise_losses(&m, &refs).unwrap();
        for (s, l) in windows.iter().zip(&batch) {
            let single = signalwise_loss(&m, s).unwrap();
            for (a, b) in single.0.iter().zip(&l.0) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
