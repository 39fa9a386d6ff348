//! The differentiable model: a shared MLP encoder feeding a K-way classifier
//! head and a K-output one-vs-rest head, plus two learnable scalar
//! temperatures that control the scaled probability views.
//!
//! Forward passes produce [`ModelOutputs`] with four probability views per
//! sample: `p = softmax(z_f)`, `q = sigmoid(z_g)`, `p_s = softmax(z_f / t_m)`,
//! and `q_s = softmax(z_g / t_o)`. Loss functions consume these views and
//! return gradients with respect to the logits (and temperatures); this module
//! propagates logit gradients back to every weight.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperatures are clamped into this interval after every optimizer step;
/// softmax(z/T) degenerates as T approaches zero.
pub const TEMPERATURE_MIN: f64 = 0.05;
pub const TEMPERATURE_MAX: f64 = 10.0;

/// Initial value for both temperatures on a fresh model.
pub const TEMPERATURE_INIT: f64 = 1.5;

/// One dense layer, `out = x . w^T + b`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Linear {
    /// Weight matrix, shape `(out_dim, in_dim)`.
    pub w: Array2<f64>,
    /// Bias, shape `(out_dim,)`.
    pub b: Array1<f64>,
}

impl Linear {
    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

/// All learnable state: encoder layers, the two heads, and the temperatures.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelParams {
    /// Encoder layers; each is followed by a ReLU.
    pub encoder: Vec<Linear>,
    /// Classifier head on the encoder features, producing `z_f`.
    pub classifier: Linear,
    /// One-vs-rest head on the same features, producing `z_g`.
    pub ood_head: Linear,
    /// Temperature for the scaled classifier view `p_s`.
    pub t_m: f64,
    /// Temperature for the scaled one-vs-rest view `q_s`.
    pub t_o: f64,
}

/// The four probability views (plus raw logits) for a batch.
///
/// Carries the temperature values the scaled views were computed with so that
/// loss gradients with respect to the temperatures can be formed without
/// re-threading the parameters.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub z_f: Array2<f64>,
    pub z_g: Array2<f64>,
    /// `softmax(z_f)` per row.
    pub p: Array2<f64>,
    /// `sigmoid(z_g)` elementwise; rows do not sum to one.
    pub q: Array2<f64>,
    /// `softmax(z_f / t_m)` per row.
    pub p_s: Array2<f64>,
    /// `softmax(z_g / t_o)` per row.
    pub q_s: Array2<f64>,
    pub t_m: f64,
    pub t_o: f64,
}

impl ModelOutputs {
    pub fn batch_size(&self) -> usize {
        self.z_f.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.z_f.ncols()
    }

    /// Build all probability views from raw logits.
    ///
    /// This is the single place the view definitions live; [`ModelParams::forward`]
    /// delegates here after running the encoder and heads.
    pub fn from_logits(z_f: Array2<f64>, z_g: Array2<f64>, t_m: f64, t_o: f64) -> Self {
        let p = softmax_rows(&z_f);
        let q = sigmoid(&z_g);
        let p_s = softmax_rows(&(&z_f / t_m));
        let q_s = softmax_rows(&(&z_g / t_o));
        ModelOutputs {
            z_f,
            z_g,
            p,
            q,
            p_s,
            q_s,
            t_m,
            t_o,
        }
    }

    /// Select a subset of rows into a new batch.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let take = |a: &Array2<f64>| ndarray::Array2::from_shape_fn((rows.len(), a.ncols()), |(i, j)| a[[rows[i], j]]);
        ModelOutputs {
            z_f: take(&self.z_f),
            z_g: take(&self.z_g),
            p: take(&self.p),
            q: take(&self.q),
            p_s: take(&self.p_s),
            q_s: take(&self.q_s),
            t_m: self.t_m,
            t_o: self.t_o,
        }
    }
}

/// Activations cached by a forward pass, needed to backpropagate.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    /// Post-ReLU activations after each encoder layer; the last entry is the
    /// feature batch consumed by both heads.
    hidden: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Encoder features (input to both heads).
    pub fn features(&self) -> &Array2<f64> {
        self.hidden.last().unwrap_or(&self.input)
    }
}

/// Gradients with respect to every parameter, mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub encoder: Vec<Linear>,
    pub classifier: Linear,
    pub ood_head: Linear,
    pub t_m: f64,
    pub t_o: f64,
}

impl ParamGrads {
    /// All-zero gradients matching the shape of `params`.
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zero = |l: &Linear| Linear {
            w: Array2::zeros(l.w.raw_dim()),
            b: Array1::zeros(l.b.raw_dim()),
        };
        ParamGrads {
            encoder: params.encoder.iter().map(zero).collect(),
            classifier: zero(&params.classifier),
            ood_head: zero(&params.ood_head),
            t_m: 0.0,
            t_o: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.w += &b.w;
            a.b += &b.b;
        }
        self.classifier.w += &other.classifier.w;
        self.classifier.b += &other.classifier.b;
        self.ood_head.w += &other.ood_head.w;
        self.ood_head.b += &other.ood_head.b;
        self.t_m += other.t_m;
        self.t_o += other.t_o;
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.encoder {
            l.w *= factor;
            l.b *= factor;
        }
        self.classifier.w *= factor;
        self.classifier.b *= factor;
        self.ood_head.w *= factor;
        self.ood_head.b *= factor;
        self.t_m *= factor;
        self.t_o *= factor;
    }

    /// Flat view in the same layout as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.classifier.w.iter());
        out.extend(self.classifier.b.iter());
        out.extend(self.ood_head.w.iter());
        out.extend(self.ood_head.b.iter());
        out.push(self.t_m);
        out.push(self.t_o);
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.to_flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn sigmoid(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.encoder
            .first()
            .map(|l| l.w.ncols())
            .unwrap_or_else(|| self.classifier.w.ncols())
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.w.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.w.ncols()
    }

    /// Forward a feature batch through the encoder and both heads.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(ModelOutputs, ForwardCache)> {
        if x.nrows() == 0 {
            return Err(Error::validation("forward called on an empty batch"));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::config(format!(
                "input dimension {} does not match encoder input dimension {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let input = x.to_owned();
        let mut hidden = Vec::with_capacity(self.encoder.len());
        let mut cur = input.clone();
        for layer in &self.encoder {
            cur = layer.forward(&cur);
            cur.mapv_inplace(|v| v.max(0.0));
            hidden.push(cur.clone());
        }
        let z_f = self.classifier.forward(&cur);
        let z_g = self.ood_head.forward(&cur);
        if z_f.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("classifier head", "non-finite logits"));
        }
        if z_g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("ood head", "non-finite logits"));
        }
        let outputs = ModelOutputs::from_logits(z_f, z_g, self.t_m, self.t_o);
        Ok((outputs, ForwardCache { input, hidden }))
    }

    /// Backpropagate logit gradients to every weight.
    ///
    /// `d_zf`/`d_zg` are per-sample gradients of some scalar loss with respect
    /// to the classifier / one-vs-rest logits. Temperature gradients are not
    /// produced here; losses that touch the scaled views report them directly.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_zf: Option<&Array2<f64>>,
        d_zg: Option<&Array2<f64>>,
    ) -> ParamGrads {
        let mut grads = ParamGrads::zeros_like(self);
        let features = cache.features();
        let n_features = features.ncols();
        let batch = features.nrows();
        let mut d_feat = Array2::<f64>::zeros((batch, n_features));

        if let Some(d) = d_zf {
            grads.classifier.w = d.t().dot(features);
            grads.classifier.b = d.sum_axis(Axis(0));
            d_feat = d_feat + d.dot(&self.classifier.w);
        }
        if let Some(d) = d_zg {
            grads.ood_head.w = d.t().dot(features);
            grads.ood_head.b = d.sum_axis(Axis(0));
            d_feat = d_feat + d.dot(&self.ood_head.w);
        }

        let mut d_act = d_feat;
        for idx in (0..self.encoder.len()).rev() {
            let act = &cache.hidden[idx];
            // ReLU gate: post-activation is positive iff pre-activation was.
            let d_pre = &d_act * &act.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let layer_input = if idx == 0 {
                &cache.input
            } else {
                &cache.hidden[idx - 1]
            };
            grads.encoder[idx].w = d_pre.t().dot(layer_input);
            grads.encoder[idx].b = d_pre.sum_axis(Axis(0));
            d_act = d_pre.dot(&self.encoder[idx].w);
        }
        grads
    }

    /// Clamp both temperatures into the allowed interval.
    pub fn clamp_temperatures(&mut self) {
        self.t_m = self.t_m.clamp(TEMPERATURE_MIN, TEMPERATURE_MAX);
        self.t_o = self.t_o.clamp(TEMPERATURE_MIN, TEMPERATURE_MAX);
    }

    pub fn n_params(&self) -> usize {
        let layers: usize = self.encoder.iter().map(Linear::n_params).sum();
        layers + self.classifier.n_params() + self.ood_head.n_params() + 2
    }

    /// Flatten every parameter into one vector.
    ///
    /// Layout: encoder layers in order (weights row-major, then bias), then
    /// the classifier head, then the one-vs-rest head, then `t_m`, `t_o`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.encoder {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.classifier.w.iter());
        out.extend(self.classifier.b.iter());
        out.extend(self.ood_head.w.iter());
        out.extend(self.ood_head.b.iter());
        out.push(self.t_m);
        out.push(self.t_o);
        out
    }

    /// Overwrite every parameter from a flat vector in [`to_flat`] layout.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length mismatch");
        let mut pos = 0;
        let mut take = |len: usize| {
            let s = &flat[pos..pos + len];
            pos += len;
            s
        };
        for l in &mut self.encoder {
            let wlen = l.w.len();
            let ws = take(wlen).to_vec();
            l.w = Array2::from_shape_vec(l.w.raw_dim(), ws).expect("shape preserved");
            let blen = l.b.len();
            l.b = Array1::from_vec(take(blen).to_vec());
        }
        for head in [&mut self.classifier, &mut self.ood_head] {
            let wlen = head.w.len();
            let ws = take(wlen).to_vec();
            head.w = Array2::from_shape_vec(head.w.raw_dim(), ws).expect("shape preserved");
            let blen = head.b.len();
            head.b = Array1::from_vec(take(blen).to_vec());
        }
        self.t_m = take(1)[0];
        self.t_o = take(1)[0];
    }

    /// Flat indices of `t_m` and `t_o` within the [`to_flat`] layout.
    pub fn temperature_indices(&self) -> (usize, usize) {
        let n = self.n_params();
        (n - 2, n - 1)
    }
}

/// Deterministically initialize a small fully-connected model.
///
/// Weights are He-scaled Gaussians from a seeded stream; biases start at zero
/// and both temperatures at [`TEMPERATURE_INIT`].
pub fn make_toy_model(
    seed: u64,
    input_dim: usize,
    hidden_dims: &[usize],
    num_classes: usize,
) -> Result<ModelParams> {
    if num_classes < 2 {
        return Err(Error::config(format!(
            "num_classes must be at least 2, got {num_classes}"
        )));
    }
    if hidden_dims.is_empty() {
        return Err(Error::config("hidden_dims must be nonempty"));
    }
    if input_dim == 0 {
        return Err(Error::config("input_dim must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make_layer = |in_dim: usize, out_dim: usize| -> Linear {
        let std = (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid normal");
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| normal.sample(&mut rng));
        Linear {
            w,
            b: Array1::zeros(out_dim),
        }
    };
    let mut encoder = Vec::with_capacity(hidden_dims.len());
    let mut prev = input_dim;
    for &h in hidden_dims {
        encoder.push(make_layer(prev, h));
        prev = h;
    }
    let classifier = make_layer(prev, num_classes);
    let ood_head = make_layer(prev, num_classes);
    Ok(ModelParams {
        encoder,
        classifier,
        ood_head,
        t_m: TEMPERATURE_INIT,
        t_o: TEMPERATURE_INIT,
    })
}

/// One-hot encode a label slice; used when building loss targets.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        out[[i, y]] = 1.0;
    }
    out
}

/// Index of the row maximum (first one on ties).
pub fn argmax_row(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}
