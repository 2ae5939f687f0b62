//! LSTM layers with backpropagation through time, and the sequence
//! autoencoder built from them.
//!
//! Sequences are `Vec<Array2>` indexed by time step; each matrix is
//! `batch × features`.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use super::dense::sigmoid;
use super::params::{ParamId, ParamLayout};

/// One LSTM direction. Gate columns are ordered `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    input: usize,
    hidden: usize,
    w: ParamId,
    u: ParamId,
    b: ParamId,
    reverse: bool,
}

pub struct LstmTrace {
    xs: Vec<Array2<f64>>,
    hs: Vec<Array2<f64>>,
    cs: Vec<Array2<f64>>,
    /// Post-activation gates per step.
    gates: Vec<Array2<f64>>,
}

impl Lstm {
    pub fn new(layout: &mut ParamLayout, prefix: &str, input: usize, hidden: usize, reverse: bool) -> Self {
        Lstm {
            input,
            hidden,
            w: layout.add(format!("{prefix}.w_ih"), input, 4 * hidden),
            u: layout.add(format!("{prefix}.w_hh"), hidden, 4 * hidden),
            b: layout.add(format!("{prefix}.bias"), 1, 4 * hidden),
            reverse,
        }
    }

    pub fn init<R: Rng>(&self, layout: &ParamLayout, params: &mut [f64], rng: &mut R) {
        let limit = 1.0 / (self.hidden as f64).sqrt();
        layout.fill_uniform(self.w, params, limit, rng);
        layout.fill_uniform(self.u, params, limit, rng);
        let mut b = layout.view_mut(self.b, params);
        b.fill(0.0);
        b.slice_mut(s![.., self.hidden..2 * self.hidden]).fill(1.0);
    }

    fn order(&self, steps: usize) -> Vec<usize> {
        if self.reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        }
    }

    pub fn forward(&self, layout: &ParamLayout, params: &[f64], xs: &[Array2<f64>]) -> LstmTrace {
        let steps = xs.len();
        let batch = xs.first().map_or(0, |x| x.nrows());
        let h = self.hidden;
        let w = layout.view(self.w, params);
        let u = layout.view(self.u, params);
        let b = layout.view(self.b, params);

        let mut hs = vec![Array2::zeros((0, 0)); steps];
        let mut cs = vec![Array2::zeros((0, 0)); steps];
        let mut gates = vec![Array2::zeros((0, 0)); steps];
        let mut h_prev = Array2::<f64>::zeros((batch, h));
        let mut c_prev = Array2::<f64>::zeros((batch, h));
        for t in self.order(steps) {
            let mut z = xs[t].dot(&w);
            z += &h_prev.dot(&u);
            z += &b;
            z.slice_mut(s![.., 0..2 * h]).mapv_inplace(sigmoid);
            z.slice_mut(s![.., 2 * h..3 * h]).mapv_inplace(f64::tanh);
            z.slice_mut(s![.., 3 * h..]).mapv_inplace(sigmoid);
            let i = z.slice(s![.., 0..h]);
            let f = z.slice(s![.., h..2 * h]);
            let g = z.slice(s![.., 2 * h..3 * h]);
            let o = z.slice(s![.., 3 * h..]);
            let c = &f * &c_prev + &i * &g;
            let hn = &o * &c.mapv(f64::tanh);
            hs[t] = hn.clone();
            cs[t] = c.clone();
            gates[t] = z;
            h_prev = hn;
            c_prev = c;
        }
        LstmTrace {
            xs: xs.to_vec(),
            hs,
            cs,
            gates,
        }
    }

    /// BPTT. `dhs[t]` is the loss gradient on the output at step `t`.
    /// Returns the input gradients per step.
    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        trace: &LstmTrace,
        dhs: &[Array2<f64>],
        grad: &mut [f64],
    ) -> Vec<Array2<f64>> {
        let steps = trace.xs.len();
        let batch = trace.xs.first().map_or(0, |x| x.nrows());
        let h = self.hidden;
        let w = layout.view(self.w, params).to_owned();
        let u = layout.view(self.u, params).to_owned();
        let mut gw = Array2::<f64>::zeros((self.input, 4 * h));
        let mut gu = Array2::<f64>::zeros((h, 4 * h));
        let mut gb = Array2::<f64>::zeros((1, 4 * h));

        let order = self.order(steps);
        let zeros = Array2::<f64>::zeros((batch, h));
        let mut dxs = vec![Array2::zeros((0, 0)); steps];
        let mut dh_next = zeros.clone();
        let mut dc_next = zeros.clone();
        for (k, &t) in order.iter().enumerate().rev() {
            let (h_prev, c_prev) = if k == 0 {
                (&zeros, &zeros)
            } else {
                (&trace.hs[order[k - 1]], &trace.cs[order[k - 1]])
            };
            let gates = &trace.gates[t];
            let i = gates.slice(s![.., 0..h]);
            let f = gates.slice(s![.., h..2 * h]);
            let g = gates.slice(s![.., 2 * h..3 * h]);
            let o = gates.slice(s![.., 3 * h..]);
            let tanh_c = trace.cs[t].mapv(f64::tanh);

            let dh = &dhs[t] + &dh_next;
            let d_o = &dh * &tanh_c;
            let dc = &dc_next + &(&dh * &o * &tanh_c.mapv(|v| 1.0 - v * v));
            let d_i = &dc * &g;
            let d_g = &dc * &i;
            let d_f = &dc * c_prev;
            dc_next = &dc * &f;

            let mut dz = Array2::<f64>::zeros((batch, 4 * h));
            dz.slice_mut(s![.., 0..h]).assign(&(&d_i * &i.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., h..2 * h])
                .assign(&(&d_f * &f.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., 2 * h..3 * h])
                .assign(&(&d_g * &g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * h..])
                .assign(&(&d_o * &o.mapv(|v| v * (1.0 - v))));

            gw += &trace.xs[t].t().dot(&dz);
            gu += &h_prev.t().dot(&dz);
            gb += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            dxs[t] = dz.dot(&w.t());
            dh_next = dz.dot(&u.t());
        }
        let mut v = layout.view_mut(self.w, grad);
        v += &gw;
        let mut v = layout.view_mut(self.u, grad);
        v += &gu;
        let mut v = layout.view_mut(self.b, grad);
        v += &gb;
        dxs
    }
}

/// A unidirectional or bidirectional LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Recurrent {
    Uni(Lstm),
    Bi(Lstm, Lstm),
}

pub enum RecurrentTrace {
    Uni(LstmTrace),
    Bi(LstmTrace, LstmTrace),
}

impl Recurrent {
    /// `width` is the output width; bidirectional layers split it evenly.
    pub fn new(layout: &mut ParamLayout, prefix: &str, input: usize, width: usize, bidirectional: bool) -> Self {
        if bidirectional {
            Recurrent::Bi(
                Lstm::new(layout, &format!("{prefix}.fwd"), input, width / 2, false),
                Lstm::new(layout, &format!("{prefix}.bwd"), input, width / 2, true),
            )
        } else {
            Recurrent::Uni(Lstm::new(layout, prefix, input, width, false))
        }
    }

    pub fn init<R: Rng>(&self, layout: &ParamLayout, params: &mut [f64], rng: &mut R) {
        match self {
            Recurrent::Uni(l) => l.init(layout, params, rng),
            Recurrent::Bi(f, b) => {
                f.init(layout, params, rng);
                b.init(layout, params, rng);
            }
        }
    }

    pub fn forward(&self, layout: &ParamLayout, params: &[f64], xs: &[Array2<f64>]) -> RecurrentTrace {
        match self {
            Recurrent::Uni(l) => RecurrentTrace::Uni(l.forward(layout, params, xs)),
            Recurrent::Bi(f, b) => RecurrentTrace::Bi(f.forward(layout, params, xs), b.forward(layout, params, xs)),
        }
    }

    /// Output at every step.
    pub fn outputs(trace: &RecurrentTrace) -> Vec<Array2<f64>> {
        match trace {
            RecurrentTrace::Uni(t) => t.hs.clone(),
            RecurrentTrace::Bi(f, b) => {
                f.hs.iter()
                    .zip(&b.hs)
                    .map(|(a, c)| concatenate![Axis(1), *a, *c])
                    .collect()
            }
        }
    }

    /// Final state: last step forward, first step backward.
    pub fn final_state(trace: &RecurrentTrace) -> Array2<f64> {
        match trace {
            RecurrentTrace::Uni(t) => t.hs.last().expect("non-empty sequence").clone(),
            RecurrentTrace::Bi(f, b) => {
                concatenate![Axis(1), *f.hs.last().expect("non-empty sequence"), b.hs[0]]
            }
        }
    }

    pub fn backward_outputs(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        trace: &RecurrentTrace,
        d_out: &[Array2<f64>],
        grad: &mut [f64],
    ) -> Vec<Array2<f64>> {
        match (self, trace) {
            (Recurrent::Uni(l), RecurrentTrace::Uni(t)) => l.backward(layout, params, t, d_out, grad),
            (Recurrent::Bi(fl, bl), RecurrentTrace::Bi(ft, bt)) => {
                let h = fl.hidden;
                let df: Vec<_> = d_out.iter().map(|d| d.slice(s![.., 0..h]).to_owned()).collect();
                let db: Vec<_> = d_out.iter().map(|d| d.slice(s![.., h..]).to_owned()).collect();
                let a = fl.backward(layout, params, ft, &df, grad);
                let b = bl.backward(layout, params, bt, &db, grad);
                a.into_iter().zip(b).map(|(x, y)| x + y).collect()
            }
            _ => unreachable!("trace kind matches layer kind"),
        }
    }

    pub fn backward_final(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        trace: &RecurrentTrace,
        d_final: &Array2<f64>,
        grad: &mut [f64],
    ) -> Vec<Array2<f64>> {
        let zeros_like =
            |t: &LstmTrace| -> Vec<Array2<f64>> { t.hs.iter().map(|h| Array2::zeros(h.raw_dim())).collect() };
        match (self, trace) {
            (Recurrent::Uni(l), RecurrentTrace::Uni(t)) => {
                let mut dhs = zeros_like(t);
                *dhs.last_mut().expect("non-empty sequence") = d_final.clone();
                l.backward(layout, params, t, &dhs, grad)
            }
            (Recurrent::Bi(fl, bl), RecurrentTrace::Bi(ft, bt)) => {
                let h = fl.hidden;
                let mut df = zeros_like(ft);
                *df.last_mut().expect("non-empty sequence") = d_final.slice(s![.., 0..h]).to_owned();
                let mut db = zeros_like(bt);
                db[0] = d_final.slice(s![.., h..]).to_owned();
                let a = fl.backward(layout, params, ft, &df, grad);
                let b = bl.backward(layout, params, bt, &db, grad);
                a.into_iter().zip(b).map(|(x, y)| x + y).collect()
            }
            _ => unreachable!("trace kind matches layer kind"),
        }
    }
}

/// Sequence autoencoder: recurrent encoder down to a latent vector, the
/// latent repeated at every step, recurrent decoder, then a per-step dense
/// output layer with sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentAe {
    encoder: Vec<Recurrent>,
    latent: Recurrent,
    decoder: Vec<Recurrent>,
    out_w: ParamId,
    out_b: ParamId,
    out_in: usize,
    x: usize,
}

pub struct RecurrentAeTrace {
    encoder: Vec<RecurrentTrace>,
    latent: RecurrentTrace,
    decoder: Vec<RecurrentTrace>,
    dec_out: Vec<Array2<f64>>,
    pub ys: Vec<Array2<f64>>,
}

impl RecurrentAe {
    pub fn new(
        layout: &mut ParamLayout,
        x: usize,
        encoder: &[usize],
        latent: usize,
        decoder: &[usize],
        bidirectional: bool,
    ) -> Self {
        let mut input = x;
        let mut enc = Vec::new();
        for (k, &width) in encoder.iter().enumerate() {
            enc.push(Recurrent::new(layout, &format!("enc.{k}"), input, width, bidirectional));
            input = width;
        }
        let lat = Recurrent::new(layout, "latent", input, latent, bidirectional);
        input = latent;
        let mut dec = Vec::new();
        for (k, &width) in decoder.iter().enumerate() {
            dec.push(Recurrent::new(layout, &format!("dec.{k}"), input, width, bidirectional));
            input = width;
        }
        let out_w = layout.add("out.weight", input, x);
        let out_b = layout.add("out.bias", 1, x);
        RecurrentAe {
            encoder: enc,
            latent: lat,
            decoder: dec,
            out_w,
            out_b,
            out_in: input,
            x,
        }
    }

    pub fn init<R: Rng>(&self, layout: &ParamLayout, params: &mut [f64], rng: &mut R) {
        for l in self
            .encoder
            .iter()
            .chain(std::iter::once(&self.latent))
            .chain(&self.decoder)
        {
            l.init(layout, params, rng);
        }
        let limit = (6.0 / (self.out_in + self.x) as f64).sqrt();
        layout.fill_uniform(self.out_w, params, limit, rng);
    }

    pub fn forward(&self, layout: &ParamLayout, params: &[f64], xs: &[Array2<f64>]) -> RecurrentAeTrace {
        let steps = xs.len();
        let mut seq = xs.to_vec();
        let mut enc_traces = Vec::new();
        for l in &self.encoder {
            let tr = l.forward(layout, params, &seq);
            seq = Recurrent::outputs(&tr);
            enc_traces.push(tr);
        }
        let lat_trace = self.latent.forward(layout, params, &seq);
        let h = Recurrent::final_state(&lat_trace);
        let mut seq: Vec<Array2<f64>> = vec![h; steps];
        let mut dec_traces = Vec::new();
        for l in &self.decoder {
            let tr = l.forward(layout, params, &seq);
            seq = Recurrent::outputs(&tr);
            dec_traces.push(tr);
        }
        let v = layout.view(self.out_w, params);
        let c = layout.view(self.out_b, params);
        let ys = seq
            .iter()
            .map(|hs| {
                let mut y = hs.dot(&v);
                y += &c;
                y.mapv_inplace(sigmoid);
                y
            })
            .collect();
        RecurrentAeTrace {
            encoder: enc_traces,
            latent: lat_trace,
            decoder: dec_traces,
            dec_out: seq,
            ys,
        }
    }

    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        trace: &RecurrentAeTrace,
        d_ys: &[Array2<f64>],
        grad: &mut [f64],
    ) {
        let v = layout.view(self.out_w, params).to_owned();
        let mut gv = Array2::<f64>::zeros(v.raw_dim());
        let mut gc = Array2::<f64>::zeros((1, self.x));
        let mut d_seq = Vec::with_capacity(d_ys.len());
        for ((dy, y), hs) in d_ys.iter().zip(&trace.ys).zip(&trace.dec_out) {
            let dz = dy * &y.mapv(|a| a * (1.0 - a));
            gv += &hs.t().dot(&dz);
            gc += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            d_seq.push(dz.dot(&v.t()));
        }
        let mut g = layout.view_mut(self.out_w, grad);
        g += &gv;
        let mut g = layout.view_mut(self.out_b, grad);
        g += &gc;

        for (l, tr) in self.decoder.iter().zip(&trace.decoder).rev() {
            d_seq = l.backward_outputs(layout, params, tr, &d_seq, grad);
        }
        // The latent was fed at every decoder step.
        let mut d_latent = d_seq[0].clone();
        for d in &d_seq[1..] {
            d_latent += d;
        }
        let mut d_seq = self
            .latent
            .backward_final(layout, params, &trace.latent, &d_latent, grad);
        for (l, tr) in self.encoder.iter().zip(&trace.encoder).rev() {
            d_seq = l.backward_outputs(layout, params, tr, &d_seq, grad);
        }
    }
}
