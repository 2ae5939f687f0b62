//! Fully connected autoencoder over flattened windows.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::params::{ParamId, ParamLayout};

pub(crate) fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stack of affine layers: ReLU on hidden layers, sigmoid on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

/// Activations kept for the backward pass; `acts[0]` is the input.
pub struct DenseTrace {
    acts: Vec<Array2<f64>>,
}

impl DenseTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("at least one layer")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.acts.pop().expect("at least one layer")
    }
}

impl DenseNet {
    pub fn new(layout: &mut ParamLayout, prefix: &str, sizes: &[usize]) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            weights.push(layout.add(format!("{prefix}.{l}.weight"), pair[0], pair[1]));
            biases.push(layout.add(format!("{prefix}.{l}.bias"), 1, pair[1]));
        }
        DenseNet {
            sizes: sizes.to_vec(),
            weights,
            biases,
        }
    }

    pub fn init<R: Rng>(&self, layout: &ParamLayout, params: &mut [f64], rng: &mut R) {
        for (l, &w) in self.weights.iter().enumerate() {
            let limit = (6.0 / (self.sizes[l] + self.sizes[l + 1]) as f64).sqrt();
            layout.fill_uniform(w, params, limit, rng);
        }
    }

    fn layers(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass for a batch (`rows = samples`).
    pub fn forward(&self, layout: &ParamLayout, params: &[f64], input: ArrayView2<f64>) -> DenseTrace {
        let mut acts = Vec::with_capacity(self.layers() + 1);
        acts.push(input.to_owned());
        for l in 0..self.layers() {
            let w = layout.view(self.weights[l], params);
            let b = layout.view(self.biases[l], params);
            let mut z = acts[l].dot(&w);
            z += &b;
            let last = l + 1 == self.layers();
            z.mapv_inplace(if last { sigmoid } else { relu });
            acts.push(z);
        }
        DenseTrace { acts }
    }

    /// Accumulates parameter gradients given `d_out`, the gradient of the
    /// loss with respect to the network output. Returns the input gradient.
    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        trace: &DenseTrace,
        d_out: &Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let n = self.layers();
        // Through the output sigmoid.
        let y = &trace.acts[n];
        let mut delta = d_out * &y.mapv(|v| v * (1.0 - v));
        for l in (0..n).rev() {
            let a_in = &trace.acts[l];
            let mut gw = layout.view_mut(self.weights[l], grad);
            gw += &a_in.t().dot(&delta);
            let mut gb = layout.view_mut(self.biases[l], grad);
            gb += &delta.sum_axis(Axis(0)).insert_axis(Axis(0));
            let w = layout.view(self.weights[l], params);
            let mut d_in = delta.dot(&w.t());
            if l > 0 {
                // ReLU derivative from the stored post-activation.
                d_in.zip_mut_with(a_in, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = d_in;
        }
        delta
    }
}
