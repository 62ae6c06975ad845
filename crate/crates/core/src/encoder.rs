//! A small pre-norm transformer encoder with analytic gradients.
//!
//! Per layer:
//!
//! ```text
//! x ← x + dropout(Attn(LN₁(x)))
//! x ← x + dropout(W₂·gelu(W₁·LN₂(x) + b₁) + b₂)
//! ```
//!
//! followed by a final layer norm. Token and learned positional embeddings are
//! summed at the input. Two heads read the final hidden states: an MLM
//! projection to vocabulary logits at any position, and a classification
//! projection from the CLS position.
//!
//! Attention never assigns weight to padding keys: their probabilities are
//! exactly zero, so padding token ids cannot influence real positions.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, layer_norm, layer_norm_backward, LayerNormCache};
use crate::optim::Parameters;
use crate::rng::{self, Rng};
use crate::tokenizer::TokenSequence;

/// Standard deviation of the normal initializer for embeddings and weight
/// matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub n_classes: usize,
}

impl EncoderConfig {
    /// A small configuration for the given vocabulary and sequence length.
    pub fn tiny(vocab_size: usize, max_len: usize, n_classes: usize) -> Self {
        EncoderConfig {
            vocab_size,
            max_len,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            dropout_rate: 0.0,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.max_len,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.n_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("all encoder dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, d_ff: usize) -> Self {
        LayerParams {
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            w_q: Array2::zeros((d, d)),
            b_q: Array1::zeros(d),
            w_k: Array2::zeros((d, d)),
            b_k: Array1::zeros(d),
            w_v: Array2::zeros((d, d)),
            b_v: Array1::zeros(d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
            w_ff1: Array2::zeros((d, d_ff)),
            b_ff1: Array1::zeros(d_ff),
            w_ff2: Array2::zeros((d_ff, d)),
            b_ff2: Array1::zeros(d),
        }
    }

    fn slices(&self) -> [&[f64]; 16] {
        [
            sl(&self.ln1_gamma),
            sl(&self.ln1_beta),
            sl(&self.w_q),
            sl(&self.b_q),
            sl(&self.w_k),
            sl(&self.b_k),
            sl(&self.w_v),
            sl(&self.b_v),
            sl(&self.w_o),
            sl(&self.b_o),
            sl(&self.ln2_gamma),
            sl(&self.ln2_beta),
            sl(&self.w_ff1),
            sl(&self.b_ff1),
            sl(&self.w_ff2),
            sl(&self.b_ff2),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 16] {
        [
            sl_mut(&mut self.ln1_gamma),
            sl_mut(&mut self.ln1_beta),
            sl_mut(&mut self.w_q),
            sl_mut(&mut self.b_q),
            sl_mut(&mut self.w_k),
            sl_mut(&mut self.b_k),
            sl_mut(&mut self.w_v),
            sl_mut(&mut self.b_v),
            sl_mut(&mut self.w_o),
            sl_mut(&mut self.b_o),
            sl_mut(&mut self.ln2_gamma),
            sl_mut(&mut self.ln2_beta),
            sl_mut(&mut self.w_ff1),
            sl_mut(&mut self.b_ff1),
            sl_mut(&mut self.w_ff2),
            sl_mut(&mut self.b_ff2),
        ]
    }
}

fn sl<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn sl_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

/// All trainable tensors of the encoder and both heads. Gradients are stored
/// in the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gamma: Array1<f64>,
    pub lnf_beta: Array1<f64>,
    pub mlm_w: Array2<f64>,
    pub mlm_b: Array1<f64>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

pub type Gradients = EncoderParams;

impl EncoderParams {
    /// All-zero tensors shaped for `config`; the starting point for gradient
    /// accumulation.
    pub fn zeros(config: EncoderConfig) -> Self {
        let d = config.d_model;
        EncoderParams {
            config,
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_len, d)),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(d, config.d_ff)).collect(),
            lnf_gamma: Array1::zeros(d),
            lnf_beta: Array1::zeros(d),
            mlm_w: Array2::zeros((d, config.vocab_size)),
            mlm_b: Array1::zeros(config.vocab_size),
            cls_w: Array2::zeros((d, config.n_classes)),
            cls_b: Array1::zeros(config.n_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams::zeros(self.config)
    }

    /// Replaces the classification head with a freshly initialized one of
    /// `n_classes` outputs.
    pub fn with_class_head(mut self, n_classes: usize, seed: u64) -> Result<Self> {
        self.config.n_classes = n_classes;
        self.config.validate()?;
        let mut rng = rng::derived(seed, 0x636c_7368, 0);
        self.cls_w = normal_matrix(&mut rng, self.config.d_model, n_classes);
        self.cls_b = Array1::zeros(n_classes);
        Ok(self)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![sl(&self.tok_emb), sl(&self.pos_emb)];
        for layer in &self.layers {
            out.extend(layer.slices());
        }
        out.extend([
            sl(&self.lnf_gamma),
            sl(&self.lnf_beta),
            sl(&self.mlm_w),
            sl(&self.mlm_b),
            sl(&self.cls_w),
            sl(&self.cls_b),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![sl_mut(&mut self.tok_emb), sl_mut(&mut self.pos_emb)];
        for layer in &mut self.layers {
            out.extend(layer.slices_mut());
        }
        out.extend([
            sl_mut(&mut self.lnf_gamma),
            sl_mut(&mut self.lnf_beta),
            sl_mut(&mut self.mlm_w),
            sl_mut(&mut self.mlm_b),
            sl_mut(&mut self.cls_w),
            sl_mut(&mut self.cls_b),
        ]);
        out
    }
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Seeded initialization: embeddings and weight matrices from N(0, 0.02²),
/// biases zero, layer-norm scales one and offsets zero.
pub fn init_params(config: EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = rng::seeded(seed);
    let d = config.d_model;
    let mut p = EncoderParams::zeros(config);
    p.tok_emb = normal_matrix(&mut rng, config.vocab_size, d);
    p.pos_emb = normal_matrix(&mut rng, config.max_len, d);
    for layer in &mut p.layers {
        layer.ln1_gamma.fill(1.0);
        layer.ln2_gamma.fill(1.0);
        layer.w_q = normal_matrix(&mut rng, d, d);
        layer.w_k = normal_matrix(&mut rng, d, d);
        layer.w_v = normal_matrix(&mut rng, d, d);
        layer.w_o = normal_matrix(&mut rng, d, d);
        layer.w_ff1 = normal_matrix(&mut rng, d, config.d_ff);
        layer.w_ff2 = normal_matrix(&mut rng, config.d_ff, d);
    }
    p.lnf_gamma.fill(1.0);
    p.mlm_w = normal_matrix(&mut rng, d, config.vocab_size);
    p.cls_w = normal_matrix(&mut rng, d, config.n_classes);
    Ok(p)
}

/// Final hidden states of one sequence, `max_len × d_model`.
pub type HiddenStates = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No dropout; outputs are a pure function of parameters and input.
    Eval,
    /// Dropout active, with per-sequence masks drawn from streams derived
    /// from `seed` and the sequence's batch index.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LayerNormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    z: Array2<f64>,
    g: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

/// Activations recorded by [`forward_recorded`]; the input to [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    hidden: HiddenStates,
}

impl ForwardCache {
    pub fn hidden(&self) -> &HiddenStates {
        &self.hidden
    }
}

fn check_sequence(config: &EncoderConfig, seq: &TokenSequence) -> Result<()> {
    if seq.ids.len() != config.max_len || seq.attention_mask.len() != config.max_len {
        return Err(Error::ShapeMismatch(format!(
            "sequence of length {} (mask {}), encoder expects {}",
            seq.ids.len(),
            seq.attention_mask.len(),
            config.max_len
        )));
    }
    if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            size: config.vocab_size,
        });
    }
    Ok(())
}

fn dropout_mask(rng: &mut Rng, rows: usize, cols: usize, rate: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

/// Forward pass over one sequence, keeping every activation needed by
/// [`backward`]. Dropout is applied only when `dropout` is given and the
/// configured rate is positive.
pub fn forward_recorded(params: &EncoderParams, seq: &TokenSequence, mut dropout: Option<&mut Rng>) -> Result<ForwardCache> {
    let cfg = &params.config;
    check_sequence(cfg, seq)?;
    let len = cfg.max_len;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let key_real: Vec<bool> = seq.attention_mask.iter().map(|&m| m != 0).collect();
    let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();

    let mut x = Array2::zeros((len, d));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(t);
        row.assign(&params.tok_emb.row(id));
        row += &params.pos_emb.row(t);
    }

    let rate = cfg.dropout_rate;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let (h1, ln1) = layer_norm(x.view(), lp.ln1_gamma.view(), lp.ln1_beta.view());
        let q = h1.dot(&lp.w_q) + &lp.b_q;
        let k = h1.dot(&lp.w_k) + &lp.b_k;
        let v = h1.dot(&lp.w_v) + &lp.b_v;
        let mut concat = Array2::zeros((len, d));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            p *= scale;
            masked_softmax_rows(&mut p, &key_real);
            general_mat_mul(1.0, &p, &v.slice(cols), 0.0, &mut concat.slice_mut(cols));
            probs.push(p);
        }
        let mut attn = concat.dot(&lp.w_o) + &lp.b_o;
        let drop1 = match dropout.as_deref_mut() {
            Some(r) if rate > 0.0 => {
                let m = dropout_mask(r, len, d, rate);
                attn *= &m;
                Some(m)
            }
            _ => None,
        };
        x += &attn;

        let (h2, ln2) = layer_norm(x.view(), lp.ln2_gamma.view(), lp.ln2_beta.view());
        let z = h2.dot(&lp.w_ff1) + &lp.b_ff1;
        let g = z.mapv(gelu);
        let mut f = g.dot(&lp.w_ff2) + &lp.b_ff2;
        let drop2 = match dropout.as_deref_mut() {
            Some(r) if rate > 0.0 => {
                let m = dropout_mask(r, len, d, rate);
                f *= &m;
                Some(m)
            }
            _ => None,
        };
        x += &f;

        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            attn: concat,
            drop1,
            ln2,
            h2,
            z,
            g,
            drop2,
        });
    }
    let (hidden, lnf) = layer_norm(x.view(), params.lnf_gamma.view(), params.lnf_beta.view());
    Ok(ForwardCache {
        ids,
        layers,
        lnf,
        hidden,
    })
}

fn masked_softmax_rows(scores: &mut Array2<f64>, key_real: &[bool]) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row
            .iter()
            .zip(key_real)
            .filter(|(_, &r)| r)
            .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
        let mut sum = 0.0;
        for (x, &real) in row.iter_mut().zip(key_real) {
            *x = if real { (*x - max).exp() } else { 0.0 };
            sum += *x;
        }
        row /= sum;
    }
}

/// Forward pass over a batch. In [`Mode::Eval`] the result is bitwise
/// reproducible.
pub fn forward(params: &EncoderParams, batch: &[TokenSequence], mode: Mode) -> Result<Vec<HiddenStates>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let cache = match mode {
                Mode::Eval => forward_recorded(params, seq, None)?,
                Mode::Train { seed } => {
                    let mut r = rng::derived(seed, 0x6472_6f70, i as u64);
                    forward_recorded(params, seq, Some(&mut r))?
                }
            };
            Ok(cache.hidden)
        })
        .collect()
}

/// Vocabulary logits at each requested position, one row per position.
pub fn mlm_logits(params: &EncoderParams, hidden: &HiddenStates, positions: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((positions.len(), params.config.vocab_size));
    for (r, &pos) in positions.iter().enumerate() {
        if pos >= hidden.nrows() {
            return Err(Error::PositionOutOfRange {
                position: pos,
                len: hidden.nrows(),
            });
        }
        let logits = hidden.row(pos).dot(&params.mlm_w) + &params.mlm_b;
        out.row_mut(r).assign(&logits);
    }
    Ok(out)
}

/// Class logits from the CLS (first) position.
pub fn class_logits(params: &EncoderParams, hidden: &HiddenStates) -> Array1<f64> {
    hidden.row(0).dot(&params.cls_w) + &params.cls_b
}

/// Loss gradients with respect to the head outputs of one sequence.
#[derive(Debug, Clone, Default)]
pub struct OutputGrad {
    /// `(position, ∂L/∂logits)` for MLM predictions.
    pub mlm: Vec<(usize, Array1<f64>)>,
    /// `∂L/∂logits` of the classification head.
    pub class: Option<Array1<f64>>,
}

/// Backpropagates head-output gradients through the recorded forward pass and
/// accumulates parameter gradients into `grads`.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, out: &OutputGrad, grads: &mut Gradients) -> Result<()> {
    let cfg = &params.config;
    if grads.config != *cfg {
        return Err(Error::ShapeMismatch("gradient buffer built for a different config".into()));
    }
    let len = cfg.max_len;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let hidden = &cache.hidden;

    let mut d_hidden = Array2::<f64>::zeros((len, d));
    for (pos, dl) in &out.mlm {
        if *pos >= len {
            return Err(Error::PositionOutOfRange { position: *pos, len });
        }
        check_len(dl.view(), cfg.vocab_size, "mlm logit gradient")?;
        outer_add(&mut grads.mlm_w, hidden.row(*pos), dl.view());
        grads.mlm_b += dl;
        let mut row = d_hidden.row_mut(*pos);
        row += &params.mlm_w.dot(dl);
    }
    if let Some(dl) = &out.class {
        check_len(dl.view(), cfg.n_classes, "class logit gradient")?;
        outer_add(&mut grads.cls_w, hidden.row(0), dl.view());
        grads.cls_b += dl;
        let mut row = d_hidden.row_mut(0);
        row += &params.cls_w.dot(dl);
    }

    let mut dx = layer_norm_backward(
        d_hidden.view(),
        &cache.lnf,
        params.lnf_gamma.view(),
        grads.lnf_gamma.view_mut(),
        grads.lnf_beta.view_mut(),
    );

    for ((lp, lc), lg) in params.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
        // feed-forward branch
        let mut df = dx.clone();
        if let Some(m) = &lc.drop2 {
            df *= m;
        }
        general_mat_mul(1.0, &lc.g.t(), &df, 1.0, &mut lg.w_ff2);
        lg.b_ff2 += &df.sum_axis(Axis(0));
        let mut dz = df.dot(&lp.w_ff2.t());
        dz.zip_mut_with(&lc.z, |g, &z| *g *= gelu_grad(z));
        general_mat_mul(1.0, &lc.h2.t(), &dz, 1.0, &mut lg.w_ff1);
        lg.b_ff1 += &dz.sum_axis(Axis(0));
        let dh2 = dz.dot(&lp.w_ff1.t());
        dx += &layer_norm_backward(
            dh2.view(),
            &lc.ln2,
            lp.ln2_gamma.view(),
            lg.ln2_gamma.view_mut(),
            lg.ln2_beta.view_mut(),
        );

        // attention branch
        let mut da = dx.clone();
        if let Some(m) = &lc.drop1 {
            da *= m;
        }
        general_mat_mul(1.0, &lc.attn.t(), &da, 1.0, &mut lg.w_o);
        lg.b_o += &da.sum_axis(Axis(0));
        let d_concat = da.dot(&lp.w_o.t());
        let mut dq = Array2::<f64>::zeros((len, d));
        let mut dk = Array2::<f64>::zeros((len, d));
        let mut dv = Array2::<f64>::zeros((len, d));
        for (h, p) in lc.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_out = d_concat.slice(cols);
            let mut ds = d_out.dot(&lc.v.slice(cols).t());
            general_mat_mul(1.0, &p.t(), &d_out, 0.0, &mut dv.slice_mut(cols));
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (mut row, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                row.zip_mut_with(&pr, |x, &pv| *x = pv * (*x - dot));
            }
            general_mat_mul(scale, &ds, &lc.k.slice(cols), 0.0, &mut dq.slice_mut(cols));
            general_mat_mul(scale, &ds.t(), &lc.q.slice(cols), 0.0, &mut dk.slice_mut(cols));
        }
        general_mat_mul(1.0, &lc.h1.t(), &dq, 1.0, &mut lg.w_q);
        general_mat_mul(1.0, &lc.h1.t(), &dk, 1.0, &mut lg.w_k);
        general_mat_mul(1.0, &lc.h1.t(), &dv, 1.0, &mut lg.w_v);
        lg.b_q += &dq.sum_axis(Axis(0));
        lg.b_k += &dk.sum_axis(Axis(0));
        lg.b_v += &dv.sum_axis(Axis(0));
        let mut dh1 = dq.dot(&lp.w_q.t());
        general_mat_mul(1.0, &dk, &lp.w_k.t(), 1.0, &mut dh1);
        general_mat_mul(1.0, &dv, &lp.w_v.t(), 1.0, &mut dh1);
        dx += &layer_norm_backward(
            dh1.view(),
            &lc.ln1,
            lp.ln1_gamma.view(),
            lg.ln1_gamma.view_mut(),
            lg.ln1_beta.view_mut(),
        );
    }

    for (t, &id) in cache.ids.iter().enumerate() {
        let row = dx.row(t);
        let mut te = grads.tok_emb.row_mut(id);
        te += &row;
        let mut pe = grads.pos_emb.row_mut(t);
        pe += &row;
    }
    Ok(())
}

fn check_len(v: ArrayView1<f64>, expected: usize, what: &str) -> Result<()> {
    if v.len() != expected {
        return Err(Error::ShapeMismatch(format!("{what} has length {}, expected {expected}", v.len())));
    }
    Ok(())
}

fn outer_add(target: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in target.rows_mut().into_iter().zip(a) {
        row.scaled_add(ai, &b);
    }
}

const MAGIC: &[u8; 8] = b"PVCKPT01";

/// Writes the binary checkpoint:
///
/// ```text
/// magic      8 bytes  "PVCKPT01"
/// config     7 × u64 LE  vocab_size max_len d_model n_heads n_layers d_ff n_classes
///            1 × f64 LE  dropout_rate
/// tensors    u64 LE count, then per tensor: u64 LE length, length × f64 LE
/// ```
///
/// Tensors appear in [`Parameters::tensors`] order.
pub fn write_checkpoint<W: Write>(params: &EncoderParams, mut w: W) -> std::io::Result<()> {
    let c = &params.config;
    w.write_all(MAGIC)?;
    for v in [c.vocab_size, c.max_len, c.d_model, c.n_heads, c.n_layers, c.d_ff, c.n_classes] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&c.dropout_rate.to_le_bytes())?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.len() as u64).to_le_bytes())?;
        for x in t {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<EncoderParams> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = read_u64(&mut r).map_err(io)? as usize;
    }
    let dropout_rate = f64::from_bits(read_u64(&mut r).map_err(io)?);
    let config = EncoderConfig {
        vocab_size: dims[0],
        max_len: dims[1],
        d_model: dims[2],
        n_heads: dims[3],
        n_layers: dims[4],
        d_ff: dims[5],
        dropout_rate,
        n_classes: dims[6],
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = EncoderParams::zeros(config);
    let count = read_u64(&mut r).map_err(io)? as usize;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(bad("tensor count does not match config"));
    }
    for t in tensors.iter_mut() {
        let n = read_u64(&mut r).map_err(io)? as usize;
        if n != t.len() {
            return Err(bad("tensor length does not match config"));
        }
        for x in t.iter_mut() {
            *x = f64::from_bits(read_u64(&mut r).map_err(io)?);
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(params, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS, PAD, SEP};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 30,
            max_len: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 12,
            dropout_rate: 0.1,
            n_classes: 5,
        }
    }

    fn seq(content: &[u32], max_len: usize) -> TokenSequence {
        TokenSequence::from_content(content, max_len)
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.n_heads = 3;
        assert!(init_params(c, 0).is_err());
        c = cfg();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        c = cfg();
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_identity_norms() {
        let a = init_params(cfg(), 4).unwrap();
        let b = init_params(cfg(), 4).unwrap();
        assert_eq!(a, b);
        assert!(a.layers[0].ln1_gamma.iter().all(|&g| g == 1.0));
        assert!(a.lnf_gamma.iter().all(|&g| g == 1.0));
        assert!(a.lnf_beta.iter().all(|&g| g == 0.0));
        assert_ne!(a, init_params(cfg(), 5).unwrap());
    }

    #[test]
    fn init_std_matches_scale() {
        let mut c = cfg();
        c.vocab_size = 2000;
        c.d_model = 16;
        let p = init_params(c, 1).unwrap();
        let xs = p.tok_emb.as_slice().unwrap();
        assert!(xs.len() >= 10_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / INIT_STD - 1.0).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn eval_is_bitwise_deterministic() {
        let p = init_params(cfg(), 2).unwrap();
        let batch = vec![seq(&[5, 6, 7], 8), seq(&[9], 8)];
        let a = forward(&p, &batch, Mode::Eval).unwrap();
        let b = forward(&p, &batch, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let t1 = forward(&p, &batch, Mode::Train { seed: 1 }).unwrap();
        assert_ne!(a, t1);
        assert_eq!(t1, forward(&p, &batch, Mode::Train { seed: 1 }).unwrap());
    }

    #[test]
    fn pad_ids_do_not_leak() {
        let p = init_params(cfg(), 3).unwrap();
        let a = seq(&[5, 6, 7], 8);
        let mut b = a.clone();
        b.ids[6] = 17;
        b.ids[7] = 11;
        let ha = forward(&p, &[a.clone()], Mode::Eval).unwrap().remove(0);
        let hb = forward(&p, &[b], Mode::Eval).unwrap().remove(0);
        let real = a.real_len();
        assert_eq!(ha.slice(s![..real, ..]), hb.slice(s![..real, ..]));
    }

    #[test]
    fn uniform_attention_returns_shared_value() {
        // Identical embeddings at every position make all queries and keys
        // equal, so attention is uniform and each position's attention output
        // is the common value vector projected through W_o.
        let mut c = cfg();
        c.n_layers = 1;
        c.dropout_rate = 0.0;
        let mut p = init_params(c, 9).unwrap();
        p.pos_emb.fill(0.0);
        let s = TokenSequence {
            ids: vec![7; 8],
            attention_mask: vec![1; 8],
            mask_position: None,
        };
        let cache = forward_recorded(&p, &s, None).unwrap();
        let lc = &cache.layers[0];
        let x0 = p.tok_emb.row(7).to_owned();
        let (h, _) = layer_norm(x0.view().insert_axis(Axis(0)), p.layers[0].ln1_gamma.view(), p.layers[0].ln1_beta.view());
        let v = h.row(0).dot(&p.layers[0].w_v) + &p.layers[0].b_v;
        for probs in &lc.probs {
            assert!(probs.iter().all(|&x| (x - 0.125).abs() < 1e-15));
        }
        for t in 0..8 {
            for j in 0..c.d_model {
                assert!((lc.attn[[t, j]] - v[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn heads_shapes_and_locality() {
        let p = init_params(cfg(), 3).unwrap();
        let h = forward(&p, &[seq(&[5, 6], 8)], Mode::Eval).unwrap().remove(0);
        assert_eq!(mlm_logits(&p, &h, &[]).unwrap().nrows(), 0);
        let l = mlm_logits(&p, &h, &[1, 2]).unwrap();
        assert_eq!(l.ncols(), 30);
        assert!(l.iter().all(|x| x.is_finite()));
        assert!(matches!(mlm_logits(&p, &h, &[8]), Err(Error::PositionOutOfRange { .. })));
        assert_eq!(class_logits(&p, &h).len(), 5);
        let mut h2 = h.clone();
        h2.row_mut(3).fill(9.0);
        assert_eq!(class_logits(&p, &h), class_logits(&p, &h2));
        let p4 = p.clone().with_class_head(4, 1).unwrap();
        assert_eq!(class_logits(&p4, &h).len(), 4);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = init_params(cfg(), 3).unwrap();
        assert!(matches!(forward(&p, &[seq(&[5], 6)], Mode::Eval), Err(Error::ShapeMismatch(_))));
        assert!(matches!(
            forward(&p, &[seq(&[99], 8)], Mode::Eval),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn unused_parameters_get_zero_gradient_and_linearity() {
        let mut c = cfg();
        c.dropout_rate = 0.0;
        let p = init_params(c, 3).unwrap();
        let s = seq(&[5, 6, 7], 8);
        let cache = forward_recorded(&p, &s, None).unwrap();
        let dl = Array1::from_iter((0..30).map(|i| (i as f64 * 0.37).sin()));
        let out = OutputGrad {
            mlm: vec![(2, dl.clone())],
            class: None,
        };
        let mut g = p.zeros_like();
        backward(&p, &cache, &out, &mut g).unwrap();
        assert!(g.cls_w.iter().all(|&x| x == 0.0));
        assert!(g.cls_b.iter().all(|&x| x == 0.0));
        // token 20 never appears
        assert!(g.tok_emb.row(20).iter().all(|&x| x == 0.0));
        assert!(g.tok_emb.row(6).iter().any(|&x| x != 0.0));

        let out2 = OutputGrad {
            mlm: vec![(2, &dl * 2.0)],
            class: None,
        };
        let mut g2 = p.zeros_like();
        backward(&p, &cache, &out2, &mut g2).unwrap();
        for (a, b) in g.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() <= 1e-14 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let p = init_params(cfg(), 8).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), p);
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn special_layout_helpers() {
        let s = seq(&[5], 4);
        assert_eq!(s.ids, vec![CLS, 5, SEP, PAD]);
    }
}
